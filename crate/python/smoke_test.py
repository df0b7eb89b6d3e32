"""Smoke test for the dlens_py extension module.

Run after `maturin develop -m crates/py/Cargo.toml`, or after
`cargo build -p dlens-py --features extension-module`, in which case the
freshly built library under target/ is loaded directly.
"""

import importlib.util
import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def load_module():
    try:
        import dlens_py

        return dlens_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libdlens_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            dst = tmp / "dlens_py.so"
            shutil.copy(lib, dst)
            spec = importlib.util.spec_from_file_location("dlens_py", dst)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("dlens_py not found: build it with `cargo build -p dlens-py --features extension-module`")


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def main():
    d = load_module()
    model = d.Model.toy(1)
    assert model.n_layers == 2 and model.d_model == 16, model

    text = " So Mary"
    assert model.decode(model.encode(text)) == text

    prompts = model.generate("ioi", 8, 0)
    assert len(prompts) == 8
    assert len(prompts[0].clean_tokens) == len(prompts[0].corrupt_tokens)

    cache = model.decompose()
    assert len(cache) == 12
    for key in cache.components():
        s = cache.sigma(key)
        assert all(a >= b for a, b in zip(s, s[1:])), key
        u = cache.u(key, 0)
        assert abs(math.sqrt(sum(x * x for x in u)) - 1.0) < 1e-4, key
    assert cache.rank("qk_l0_h0") == model.d_head

    masks, history = d.train_masks(model, cache, "ioi", n_train=16, n_val=8, seed=0,
                                   config_json=json.dumps({"max_epochs": 2, "batch_size": 8}))
    assert len(history) == 2
    for key in masks.components():
        assert all(0.0 <= v <= 1.0 for v in masks.values(key))
    sp = masks.sparsity(model)
    assert 0.0 <= sp["s_rel"] <= sp["s_full"] <= 1.0, sp

    tokens = prompts[0].clean_tokens
    spec = {"edits": [{"layer": 1, "head": 0, "direction": 0, "mu_he": 1.0, "mu_she": -1.0}],
            "target": "he", "sigma_scale": 0.0}
    base, edited, delta = d.intervene(model, cache, tokens, json.dumps(spec))
    assert close(base, edited, 0.0) and all(x == 0.0 for x in delta)
    assert close(base, model.logits(tokens), 1e-4)

    assert d.kl_divergence(base, base) < 1e-12

    for bad in (lambda: model.generate("nope", 1, 0), lambda: cache.rank("qk_l9_h0")):
        try:
            bad()
        except (ValueError, KeyError):
            pass
        else:
            raise AssertionError("expected an error")

    with tempfile.TemporaryDirectory() as tmp:
        cache.save(tmp)
        again = d.SvdCache.load(tmp)
        assert again.sigma("ov_l1_h1") == cache.sigma("ov_l1_h1")
        masks.save(tmp)
        back = d.Masks.load(tmp)
        assert back.values("qk_l0_h0") == masks.values("qk_l0_h0")
        assert json.loads(back.meta())["task"] == "ioi"

    print("dlens_py smoke test OK")


if __name__ == "__main__":
    main()
