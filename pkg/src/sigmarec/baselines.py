"""Item-ID autoregressive transformer: the non-generative reference model.

Same block stack as the sequence model, but every item is its own token and
the output layer is tied to the input table.  Trained on the SFT samples'
histories (next item at every position) for the same number of steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .numeric import OptimState, adamw_step, clip_grad_norm, log_softmax, make_rng
from .transformer import BlockConfig, blocks_backward, blocks_forward, init_blocks

log = logging.getLogger(__name__)


@dataclass
class AutoregressiveId:
    config: BlockConfig
    params: dict[str, np.ndarray]
    n_items: int

    def hidden(self, histories) -> np.ndarray:
        """Hidden state at each history's last item."""
        toks, mask = _pad(histories, self.config.max_len)
        out, _, _ = self._forward(toks, keep=False)
        last = np.maximum(mask.sum(axis=1) - 1, 0)
        return out[np.arange(len(toks)), last]

    def _forward(self, toks: np.ndarray, keep: bool):
        p = self.params
        x = p["emb"][toks] + p["pos"][: toks.shape[1]]
        return blocks_forward(p, self.config, x, keep=keep)

    def recommend(self, history, k: int) -> np.ndarray:
        h = self.hidden([history])[0]
        scores = self.params["emb"][: self.n_items] @ h
        return np.lexsort((np.arange(self.n_items), -scores))[:k]


def _pad(histories, max_len: int):
    """Right-pad with item 0; causal attention keeps pads out of real positions."""
    rows = [list(h)[-max_len:] for h in histories]
    width = max(1, max(len(r) for r in rows))
    toks = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        toks[i, : len(r)] = r
        mask[i, : len(r)] = True
    return toks, mask


def init_autoregressive_id(n_items: int, cfg: BlockConfig, seed: int) -> AutoregressiveId:
    rng = make_rng(seed, "arid", "init")
    p = init_blocks(rng, cfg)
    p["emb"] = rng.normal(0.0, 0.1, (n_items, cfg.d_model))
    p["pos"] = rng.normal(0.0, 0.1, (cfg.max_len, cfg.d_model))
    return AutoregressiveId(cfg, p, n_items)


def arid_loss(model: AutoregressiveId, toks: np.ndarray, mask: np.ndarray, need_grad: bool = True):
    """Mean next-item NLL over valid (input, next) pairs with a tied output table."""
    p = model.params
    inp, nxt = toks[:, :-1], toks[:, 1:]
    valid = mask[:, :-1] & mask[:, 1:]
    final, _, acts = model._forward(inp, keep=need_grad)
    logits = final @ p["emb"].T
    logp = log_softmax(logits, axis=-1)
    n = max(int(valid.sum()), 1)
    picked = np.take_along_axis(logp, nxt[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n)
    if not need_grad:
        return loss, {}
    d_logits = np.exp(logp)
    np.put_along_axis(d_logits, nxt[..., None], np.take_along_axis(d_logits, nxt[..., None], -1) - 1.0, -1)
    d_logits *= (valid / n)[..., None]
    grads: dict[str, np.ndarray] = {}
    d_final = d_logits @ p["emb"]
    d_emb = d_logits.reshape(-1, model.n_items).T @ final.reshape(-1, final.shape[-1])
    dx = blocks_backward(p, model.config, d_final, acts, grads)
    d_emb += nn.scatter_add_rows(inp, dx, model.n_items)
    grads["emb"] = d_emb
    grads["pos"] = np.zeros_like(p["pos"])
    grads["pos"][: inp.shape[1]] = dx.sum(axis=0)
    return loss, grads


def train_autoregressive_id(world, dataset, cfg) -> AutoregressiveId:
    """Fit on ``history + target`` sequences from the shared SFT samples."""
    bcfg = BlockConfig(cfg.d_model, 4, cfg.n_layers, 2 * cfg.d_model, cfg.max_history + 2)
    model = init_autoregressive_id(world.n_items, bcfg, cfg.seed)
    rng = make_rng(cfg.seed, "arid", "train")
    state = OptimState(cfg.sft_lr, weight_decay=0.01, warmup_steps=30,
                       no_decay=frozenset(k for k in model.params if k.endswith(("_b", "_g")) or k == "pos"))
    seqs = [list(s.history) + [s.target] for s in dataset]
    for step in range(1, cfg.sft_steps + 1):
        pick = rng.choice(len(seqs), min(cfg.sft_batch, len(seqs)), replace=False)
        toks, mask = _pad([seqs[i] for i in pick], bcfg.max_len)
        work = AutoregressiveId(bcfg, {k: v.astype(np.float32) for k, v in model.params.items()}, model.n_items)
        loss, grads = arid_loss(work, toks, mask)
        grads = {k: g.astype(np.float64) for k, g in grads.items()}
        clip_grad_norm(grads, 1.0)
        adamw_step(model.params, grads, state)
        if step % 100 == 0:
            log.info("arid step %d loss %.4f", step, loss)
    return model
