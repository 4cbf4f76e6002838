import numpy as np
import pytest
import torch

from sycoca.config import ModelConfig, RunConfig
from sycoca.model import init_params
from sycoca.tokenizer import BOS, CLS, EOS, PAD


def micro_config(**train) -> RunConfig:
    """d_model 16, one layer per stack, 2x2 patch grid, vocab 32."""
    model = ModelConfig(
        d_model=16, n_heads=2, n_layers_img_enc=1, n_layers_txt_enc=1, n_layers_img_dec=1,
        n_layers_txt_dec=1, patch_size=4, image_hw=8, max_text_len=8, vocab_size=32,
        embed_dim=8, mlp_ratio=2, init_std=0.3,
    )
    cfg = RunConfig(model=model)
    cfg.train.total_steps, cfg.train.warmup_steps = 20, 5
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


def random_ids(n: int, max_len: int, vocab: int, rng: np.random.Generator, min_content: int = 1) -> torch.Tensor:
    """Framed rows BOS content EOS CLS PAD... with content ids drawn from [5, vocab)."""
    rows = []
    for _ in range(n):
        k = int(rng.integers(min_content, max_len - 3 + 1))
        content = rng.integers(5, vocab, size=k).tolist()
        row = [BOS, *content, EOS, CLS]
        rows.append(row + [PAD] * (max_len - len(row)))
    return torch.tensor(rows, dtype=torch.long)


@pytest.fixture
def micro():
    cfg = micro_config()
    rng = np.random.default_rng(7)
    model = init_params(cfg.model, seed=3, dtype=torch.float64)
    n, P, D = 4, cfg.model.num_patches, cfg.model.patch_dim
    patches = torch.from_numpy(rng.uniform(0, 1, size=(n, P, D)))
    ids = random_ids(n, cfg.model.max_text_len, cfg.model.vocab_size, rng)
    return cfg, model, patches, ids


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``criterion(n, title)`` feed one summary line per criterion.

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "failed": []})
    if report.failed or report.skipped:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        extra = "" if e["ok"] else f"  (failed: {', '.join(e['failed'])})"
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}{extra}")
