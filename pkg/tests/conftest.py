import numpy as np
import pytest

from sigmarec.world import WorldConfig, generate_world


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_items=600, n_users=120, n_events=6000, n_top=4, n_sub=2, n_style=3)
    return generate_world(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def build_tiny_model(seed=0, *, n_items=24, levels=2, codebook_size=4, prefix_len=1, history_prefix_len=1,
                     history_item=True, fusion="pretrained", d_model=8, max_len=64):
    """A model small enough for finite differences and exhaustive enumeration."""
    from sigmarec.seqmodel import ModelConfig, init_model
    from sigmarec.tokenizer import ItemStore

    r = np.random.default_rng(seed)
    has = r.random(n_items) > 0.2
    store = ItemStore(r.normal(size=(n_items, 3)), r.normal(size=(n_items, 4)), r.normal(size=(n_items, 2)), has)
    sids = r.integers(0, codebook_size, size=(n_items, levels))
    cfg = ModelConfig(d_model=d_model, n_heads=2, n_layers=1, d_ff=2 * d_model, max_len=max_len, levels=levels,
                      codebook_size=codebook_size, prefix_len=prefix_len, history_prefix_len=history_prefix_len,
                      history_item=history_item, fusion=fusion, n_age=2, n_gender=2, n_region=2, n_query=3,
                      n_category=3, n_season=2, n_holiday=2)
    model = init_model(cfg, store, sids, seed)
    # larger output weights so logits are not all near-uniform
    model.params["head_w"] = r.normal(0.0, 1.0, model.params["head_w"].shape)
    model.params["head_b"] = r.normal(0.0, 0.5, model.params["head_b"].shape)
    return model


def random_sample(r, model, task="JustForYou", n_hist=None):
    from sigmarec.sft import InstructionSample

    n = model.n_items
    n_hist = int(r.integers(0, 5)) if n_hist is None else n_hist
    cons = ()
    if task == "Season":
        cons = (("season", int(r.integers(0, 2))),)
    elif task == "Query":
        cons = (("query", int(r.integers(0, 3))),)
    return InstructionSample(int(r.integers(0, 100)), (int(r.integers(0, 2)), int(r.integers(0, 2)),
                                                       int(r.integers(0, 2))),
                             tuple(int(x) for x in r.integers(0, n, n_hist)), task, cons, int(r.integers(0, n)))


@pytest.fixture
def tiny_model():
    return build_tiny_model


def sampled_grad_error(loss, grads, params, names, per_param=12, seed=0, eps=1e-6):
    """Max relative error of analytic ``grads`` on randomly chosen coordinates."""
    r = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        arr = params[name]
        g = grads.get(name, np.zeros_like(arr))
        flat = arr.reshape(-1)
        for i in r.choice(flat.size, min(per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            a = loss()
            flat[i] = old - eps
            b = loss()
            flat[i] = old
            num = (a - b) / (2 * eps)
            worst = max(worst, abs(num - g.reshape(-1)[i]) / max(1.0, abs(num)))
    return worst


TINY_PIPELINE = """\
n_items = 300
n_users = 60
n_events = 3000
pairs_semantic = 300
pairs_visual = 100
pairs_knowledge = 100
pairs_collaborative = 300
grounding_steps = 4
grounding_batch = 32
levels = 2
codebook_size = 8
rq_epochs = 1
d_model = 16
n_layers = 1
max_history = 5
sft_steps = 3
sft_batch = 8
negatives = 8
shared_pool = 4
mix_justforyou = 30
mix_query = 10
mix_category = 10
mix_longtail = 10
mix_discover = 10
mix_season = 10
mix_holiday = 10
beams = 4
per_beam = 10
eval_cases = 8
"""

PIPELINE_STEPS = (["gen-data"], ["train-grounding"], ["fit-quantizer"], ["sft-train"], ["build-index"],
                  ["evaluate", "--baseline", "Popularity"],
                  ["serve-sim", "--replay", "200", "--users-shards", "2", "--export-u2i", "{out}/u2i.tsv"])


def run_cli_pipeline(out, seed=7, capsys=None):
    """Every stage of the tiny pipeline through the CLI; returns stdout per step."""
    from sigmarec.cli import main

    out.mkdir(parents=True, exist_ok=True)
    (out / "tiny.cfg").write_text(TINY_PIPELINE)
    logs = {}
    for step in PIPELINE_STEPS:
        argv = ["--config", str(out / "tiny.cfg"), "--seed", str(seed), "--out-dir", str(out)]
        argv += [a.format(out=out) for a in step]
        assert main(argv) == 0
        if capsys is not None:
            logs[step[0]] = capsys.readouterr().out
    return logs


def tree_bytes(root):
    """Relative path -> bytes for every file under ``root``, skipping the wall-clock column of metrics."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "metrics.csv":
                data = b"\n".join(b",".join(line.split(b",")[:-1]) for line in data.splitlines())
            out[str(p.relative_to(root))] = data
    return out
