"""The twelve acceptance criteria, one test each.

Each test prints a ``criterion N: PASS|FAIL`` line (visible with ``-s``) and
the terminal summary repeats all of them.  Run just these with
``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from dcpt import layers as L
from dcpt import tensor as T
from dcpt import transformer as TR
from dcpt.checkpoint import BadMagicError, TruncatedCheckpointError, dumps, load_model
from dcpt.config import ABLATIONS, ModelConfig
from dcpt.gradcam import class_activation_map, gradcam_heatmap
from dcpt.keyframes import KeyframeError, parse_annexb_frames, parse_mp4_keyframes
from dcpt.metrics import auc
from dcpt.rng import RandomSource
from dcpt.tensor import Tensor, grad_check
from dcpt.training import TrainHyper, fit

import streams as S
from conftest import ACCEPTANCE
from oracles import attention_loops, auc_pairs, conv2d_loops, smooth_grad_check
from test_training import separable


def report(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- 1


def _op_cases():
    """name -> (input shapes, f(rng, *tensors) -> output tensor)."""
    return {
        "add": ([(3, 4), (4,)], lambda g, a, b: T.add(a, b)),
        "sub": ([(3, 4), (3, 1)], lambda g, a, b: T.sub(a, b)),
        "mul": ([(3, 4), (3, 4)], lambda g, a, b: T.mul(a, b)),
        "div": ([(3, 4), (3, 4)], lambda g, a, b: T.div(a, b * b + 0.5)),
        "exp": ([(3, 4)], lambda g, a: T.exp(a)),
        "log": ([(3, 4)], lambda g, a: T.log(a * a + 0.5)),
        "relu": ([(3, 4)], lambda g, a: T.relu(a)),
        "gelu": ([(3, 4)], lambda g, a: T.gelu(a)),
        "sum": ([(3, 4)], lambda g, a: T.tsum(a, axis=1, keepdims=True) * a),
        "mean": ([(3, 4)], lambda g, a: T.tmean(a, axis=0) * a),
        "reshape": ([(3, 4)], lambda g, a: T.reshape(a, (2, 6))),
        "transpose": ([(2, 3, 4)], lambda g, a: T.transpose(a, (2, 0, 1))),
        "swapaxes": ([(2, 3, 4)], lambda g, a: T.swapaxes(a, 1, 2)),
        "getitem": ([(4, 5)], lambda g, a: a[1:3, ::2]),
        "concat": ([(2, 3), (2, 2)], lambda g, a, b: T.concat([a, b], axis=1)),
        "matmul": ([(2, 3, 4), (2, 4, 2)], lambda g, a, b: T.matmul(a, b)),
        "softmax": ([(3, 4)], lambda g, a: T.softmax(a, axis=-1)),
        "log_softmax": ([(3, 4)], lambda g, a: T.log_softmax(a, axis=-1)),
        "conv2d": ([(2, 2, 5, 5), (3, 2, 3, 3), (3,)], lambda g, x, w, b: L.conv2d(x, w, b, 2, 1)),
        "depthwise_conv2d": ([(2, 3, 4, 4), (3, 1, 3, 3)], lambda g, x, w: L.conv2d(x, w, None, 1, 1, groups=3)),
        "separable_conv2d": ([(1, 2, 4, 4), (2, 1, 3, 3), (3, 2, 1, 1)], lambda g, x, d, p: L.separable_conv2d(x, d, p)),
        "max_pool2d": ([(2, 2, 5, 5)], lambda g, x: L.max_pool2d(x)),
        "batch_norm_train": (
            [(3, 2, 2, 2), (2,), (2,)],
            lambda g, x, ga, be: L.batch_norm(x, ga + 1.5, be, np.zeros(2), np.ones(2), True),
        ),
        "batch_norm_eval": (
            [(3, 2, 2, 2), (2,), (2,)],
            lambda g, x, ga, be: L.batch_norm(x, ga, be, np.full(2, 0.1), np.full(2, 0.7), False),
        ),
        "layer_norm": ([(2, 3, 5), (5,), (5,)], lambda g, x, ga, be: L.layer_norm(x, ga, be)),
        "linear": ([(2, 3, 4), (4, 5), (5,)], lambda g, x, w, b: L.linear(x, w, b)),
        "mix_heads": ([(1, 3, 2, 2), (3, 3)], lambda g, a, th: TR.mix_heads(a, th)),
        "re_attention": (
            [(1, 3, 4), (1, 3, 4), (1, 3, 4), (2, 2)],
            lambda g, q, k, v, th: TR.re_attention(q, k, v, th, 2),
        ),
        "cross_entropy": ([(4, 2)], lambda g, z: TR.cross_entropy(z * 3.0, [0, 1, 1, 0])),
    }


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    worst, failures, checked = 0.0, [], 0
    for name, (shapes, op) in _op_cases().items():
        for seed in range(20):
            rng = RandomSource(1000 + seed)
            xs = [t64(rng.uniform(-1, 1, s)) for s in shapes]
            w = t64(rng.uniform(-1, 1, op(rng, *xs).shape))
            for i in range(len(xs)):

                def f(v, i=i):
                    args = xs[:i] + [v] + xs[i + 1 :]
                    return T.tsum(op(rng, *args) * w)

                err = grad_check(f, xs[i])
                worst = max(worst, err)
                if err >= 1e-4:
                    failures.append((name, seed, i, err))
        checked += 1

    # whole tiny model, float64, random head so gradients reach every layer.
    # Batch 4: with 1x1 patch maps the projection batch norm sees B values.
    model = TR.DeepfakeDetector(ModelConfig.tiny(precision="float64"), seed=5)
    rng = RandomSource(6)
    model.transformer.head.weight.data[...] = rng.uniform(-0.5, 0.5, model.transformer.head.weight.shape)
    model.cls_token.data[...] = rng.uniform(-0.5, 0.5, model.cls_token.shape)
    x = rng.uniform(0, 1, (4, 3, 32, 32))
    y = [0, 1, 0, 1]
    model.zero_grad()
    TR.cross_entropy(model(x), y).backward()
    loss = lambda: TR.cross_entropy(model(x), y).item()
    coords = skipped = 0
    params = list(model.named_parameters())
    for name, p in params[:: max(1, len(params) // 25)]:
        picks = [rng.randbelow(p.data.size) for _ in range(min(5, p.data.size))]
        err, skip = smooth_grad_check(loss, p, picks)
        worst = max(worst, err)
        coords += len(picks) - skip
        skipped += skip
        if err >= 1e-4:
            failures.append(("model", name, err))
    elapsed = time.perf_counter() - start
    ok = not failures and coords >= 100 and skipped <= 0.1 * (coords + skipped) and elapsed < 120
    report(1, ok, f"{checked} ops x 20 seeds + {coords} model coords ({skipped} skipped at kinks), worst rel err {worst:.2e}, {elapsed:.1f}s; failures {failures[:3]}")


# ---------------------------------------------------------------- 2


def test_criterion_02_shape_contract():
    # full widths, one block per phase: every shape in the contract at 224 x 224
    cfg = ModelConfig.full(phase_depths=[1, 1, 1])
    model = TR.DeepfakeDetector(cfg, seed=0)
    cap = {}
    logits = model(np.random.default_rng(0).random((2, 3, 224, 224)).astype(np.float32), capture=cap)
    got = [
        cap["features"].shape[1:],
        cap["tokens"].tokens.shape[1:],
        cap["phase1"].tokens.shape[1:],
        cap["phase2"].tokens.shape[1:],
        logits.shape[1:],
    ]
    want = [(512, 7, 7), (50, 512), (17, 1024), (5, 2048), (2,)]
    trace = dict(TR.shape_trace(ModelConfig.full()))
    traced = [trace["features"][1:], trace["phase0"][1:], trace["phase1"][1:], trace["phase2"][1:]]
    ok = got == want and traced == want[:4]
    del model
    report(2, ok, f"224px forward {got}; [8,8,8] trace {traced}")


# ---------------------------------------------------------------- 3


def test_criterion_03_re_attention_reduction():
    worst, zero_ok = 0.0, True
    for case in range(50):
        rng = RandomSource(300 + case)
        h = [1, 2, 4][case % 3]
        n = 1 + rng.randbelow(7)
        q, k, v = (t64(rng.uniform(-2, 2, (2, n, 8))) for _ in range(3))
        ref = TR.multi_head_attention(q, k, v, h).data
        worst = max(worst, np.abs(TR.re_attention(q, k, v, t64(np.eye(h)), h).data - ref).max())
        zero_ok &= bool((TR.re_attention(q, k, v, t64(np.zeros((h, h))), h).data == 0).all())
    report(3, worst < 1e-12 and zero_ok, f"theta=I max diff {worst:.1e} over 50 cases; theta=0 exactly zero: {zero_ok}")


# ---------------------------------------------------------------- 4


def test_criterion_04_attention_oracle():
    worst = 0.0
    for t_len in (1, 3, 5):
        for h in (1, 2):
            rng = RandomSource(40 + 10 * t_len + h)
            q, k, v = (rng.uniform(-1, 1, (t_len, 4)) for _ in range(3))
            got = TR.multi_head_attention(t64(q[None]), t64(k[None]), t64(v[None]), h).data[0]
            worst = max(worst, np.abs(got - attention_loops(q, k, v, h)).max())
    report(4, worst < 1e-10, f"max diff vs loop nest {worst:.1e} over T in (1,3,5), h in (1,2)")


# ---------------------------------------------------------------- 5


def test_criterion_05_positional_encoding():
    ok = True
    for w, c in [(1, 2), (3, 8), (7, 512), (4, 1024)]:
        pe = TR.positional_encoding(w, c, 10000.0)
        ok &= bool((pe[0, 0::2] == 0).all() and (pe[0, 1::2] == 1).all())
        ok &= bool(np.abs(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2 - 1).max() < 1e-12)
    v = TR.positional_encoding(2, 4, 10000.0)[1, 0]
    ok &= abs(v - 0.841471) <= 1e-6
    report(5, ok, f"origin row and sin^2+cos^2 hold; PE(1,0) = {v:.9f}")


# ---------------------------------------------------------------- 6


def test_criterion_06_separable_equivalence():
    worst = 0.0
    for seed in range(10):
        rng = RandomSource(600 + seed)
        x, dw, pw = rng.uniform(-1, 1, (2, 3, 5, 5)), rng.uniform(-1, 1, (3, 1, 3, 3)), rng.uniform(-1, 1, (4, 3, 1, 1))
        got = L.separable_conv2d(t64(x), t64(dw), t64(pw), padding=1).data
        oracle = conv2d_loops(conv2d_loops(x, dw, None, 1, 1, groups=3), pw)
        worst = max(worst, np.abs(got - oracle).max())
    x = RandomSource(7).uniform(-1, 1, (2, 3, 5, 5))
    spike = np.zeros((3, 1, 3, 3))
    spike[:, 0, 1, 1] = 1.0
    ident = L.separable_conv2d(t64(x), t64(spike), t64(np.eye(3).reshape(3, 3, 1, 1)), padding=1).data
    exact = bool((ident == x).all())
    report(6, worst < 1e-10 and exact, f"max diff vs two-stage oracle {worst:.1e}; identity kernels exact: {exact}")


# ---------------------------------------------------------------- 7


def test_criterion_07_auc_oracle():
    rng = RandomSource(700)
    mismatches = 0
    for _ in range(100):
        n = 2 + rng.randbelow(199)
        labels = [rng.randbelow(2) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        scores = [rng.randbelow(25) / 25 for _ in range(n)]
        mismatches += auc(scores, labels) != auc_pairs(scores, labels)
    perfect = auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    tied = auc([0.4] * 6, [1, 0, 1, 0, 0, 1])
    report(7, mismatches == 0 and perfect == 1.0 and tied == 0.5, f"{mismatches} mismatches in 100 sets; perfect {perfect}; tied {tied}")


# ---------------------------------------------------------------- 8


def test_criterion_08_keyframe_fixtures():
    a = parse_mp4_keyframes(S.mp4(10, [1, 5, 9])).keyframes
    b = parse_mp4_keyframes(S.mp4(10, None)).keyframes
    c = parse_annexb_frames(S.annexb_from_kinds(S.GOP10_KINDS)).keyframes
    m_full = S.mp4_from_kinds(S.GOP10_KINDS * 2)
    a_full = S.annexb_from_kinds(S.GOP10_KINDS * 2, 2)
    full_kinds = [k for _, k in parse_annexb_frames(a_full).entries]
    rng = RandomSource(800)
    typed, prefix_ok, crashes, silent_mp4 = 0, 0, [], 0
    for _ in range(1000):
        for data, parse in ((m_full, parse_mp4_keyframes), (a_full, parse_annexb_frames)):
            cut = rng.randbelow(len(data) - 1)
            try:
                r = parse(data[:cut])
            except KeyframeError:
                typed += 1
                continue
            except Exception as exc:  # noqa: BLE001
                crashes.append(repr(exc))
                continue
            if parse is parse_mp4_keyframes:
                silent_mp4 += 1
            elif [k for _, k in r.entries] == full_kinds[: r.total_frames]:
                prefix_ok += 1  # cut fell between NAL units: a shorter valid stream
            else:
                crashes.append("annexb prefix disagrees")
    ok = a == [0, 4, 8] and b == list(range(10)) and c == [0, 9] and not crashes and silent_mp4 == 0
    report(8, ok, f"stss {a}; no stss {len(b)} I; annexb {c}; 2000 cuts: {typed} typed errors, {prefix_ok} valid annexb prefixes, {len(crashes)} crashes")


# ---------------------------------------------------------------- 9


def test_criterion_09_learning_sanity():
    x, y = separable(32, 32, seed=0)
    cfg = ModelConfig(image_size=32, base_channels=4, phase_depths=[1, 1, 1], phase_heads=[1, 2, 4])
    model = TR.DeepfakeDetector(cfg, seed=0)
    start = time.perf_counter()
    records = fit(model, x, y, TrainHyper(epochs=200, batch_size=32, seed=0))
    elapsed = time.perf_counter() - start
    first_full = next((r["epoch"] for r in records if r["train_acc"] == 1.0), None)
    model.eval()
    eval_acc = float((model.predict_proba(x).argmax(1) == y).mean())
    loss0 = records[0]["loss"]
    ok = first_full is not None and eval_acc == 1.0 and abs(loss0 - math.log(2)) < 0.1 and elapsed < 300
    report(9, ok, f"epoch-0 loss {loss0:.4f}; 100% train acc first at epoch {first_full}; final eval acc {eval_acc}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 10


def test_criterion_10_ablation_constructibility():
    rows = []
    settings = [(a, [8, 8, 8]) for a in ABLATIONS] + [("reattention", d) for d in ([4, 4, 6], [10, 10, 12])]
    x = np.random.default_rng(1).random((2, 3, 64, 64)).astype(np.float32)
    for ablation, depths in settings:
        model = TR.DeepfakeDetector(ModelConfig(image_size=64, ablation=ablation, phase_depths=depths), seed=0)
        loss = TR.cross_entropy(model(x), [0, 1])
        loss.backward()
        grads_ok = all(p.grad is not None and np.isfinite(p.grad).all() for p in model.parameters())
        rows.append((ablation, tuple(depths), math.isfinite(loss.item()) and grads_ok))
    ok = all(r[2] for r in rows)
    report(10, ok, "finite loss and gradients: " + ", ".join(f"{a}{list(d)}" for a, d, good in rows if good))


# ---------------------------------------------------------------- 11


def test_criterion_11_reproducibility_and_persistence():
    x, y = separable(16, 32, seed=3)
    cfg = ModelConfig.tiny()
    runs = []
    for _ in range(2):
        model = TR.DeepfakeDetector(cfg, seed=9)
        rec = fit(model, x, y, TrainHyper(epochs=3, batch_size=8, seed=9), augment_flags=np.ones(16, bool))
        runs.append((rec, dumps(model), model))
    repeat = runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    model = runs[0][2].eval()
    back = load_model(runs[0][1])
    logits_same = bool((model(x).data == back(x).data).all())
    blob = runs[0][1]
    try:
        load_model(b"XXXX" + blob[4:])
        magic = False
    except BadMagicError:
        magic = True
    try:
        load_model(blob[: len(blob) // 2])
        trunc = False
    except TruncatedCheckpointError:
        trunc = True
    ok = repeat and logits_same and magic and trunc
    report(11, ok, f"bitwise repeat {repeat}; round-trip logits identical {logits_same}; bad magic typed {magic}; truncation typed {trunc}")


# ---------------------------------------------------------------- 12


def test_criterion_12_gradcam():
    x, y = separable(8, 32, seed=4)
    model = TR.DeepfakeDetector(ModelConfig.tiny(), seed=2)
    fit(model, x, y, TrainHyper(epochs=3, batch_size=4, lr=1e-3, seed=2))
    maps = [gradcam_heatmap(model, x[i], layer, 1) for i in range(2) for layer in range(5)]
    contract = all(m.shape == (32, 32) and m.min() >= 0 and m.max() <= 1 and m.max() in (0.0, 1.0) for m in maps)
    live = sum(m.max() == 1.0 for m in maps)
    gen = np.random.default_rng(12)
    a, w = gen.normal(size=(1, 6, 6)), gen.normal(size=(1, 6, 6)) + 0.2
    act = Tensor(a, requires_grad=True)
    cam = class_activation_map(act, (act * Tensor(w)).sum())
    ref = np.maximum(w.mean() * a[0], 0)
    ref = (ref - ref.min()) / (ref.max() - ref.min())
    toy = float(np.abs(cam - ref).max())
    report(12, contract and live > 0 and toy < 1e-8, f"{len(maps)} heatmaps in [0,1] at 32x32 ({live} with max 1); linear toy diff {toy:.1e}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
