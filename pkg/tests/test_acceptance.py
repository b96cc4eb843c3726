"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records one ``ACCEPTANCE n PASS|FAIL`` line (printed directly
and repeated in the terminal summary), then asserts.
"""

import json
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import kernel_sum_resize, oracle_stats, write_scene
from mrefsr.align import match_offsets
from mrefsr.bench import run_bench
from mrefsr.gradcheck import tiny_model_check
from mrefsr.lmr.builder import (DEDUP_PSNR_DB, H_OVERLAP, H_SIZE, M_OVERLAP, M_SIZE, PATCH, BuildConfig,
                                build_dataset, classify, compute_pair_stats, dedup_psnr, list_groups, load_group,
                                read_index)
from mrefsr.lmr.manifest import load_manifest
from mrefsr.lmr.scenes import make_scene
from mrefsr.mam import attention_weights, mam_forward, register_mam
from mrefsr.metrics import bicubic_resize, load_png, psnr_y, quantize, rgb_to_y, ssim_y
from mrefsr.model import ModelConfig, MrefsrModel, predict
from mrefsr.optim import ParamStore
from mrefsr.pipeline import RefGroupSample, eval_group, forward_sr, train
from mrefsr.safm import compute_masks, register_safm, safm_forward
from mrefsr.synthetic import make_groups
from mrefsr.tensor import Tensor, conv2d


def record(n, title, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    line = f"ACCEPTANCE {n:2d} {status}  {title}: {detail} ({elapsed:.1f}s, budget {budget:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert in_time, line


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_01_attention_normalization():
    rng = np.random.default_rng(101)
    worst_sum, draws, interior_ok, single_ok = 0.0, 0, True, True
    with Clock() as clk:
        for d in range(1000):
            n = (1, 2, 3, 5, 8)[d % 5]
            c, h, w = (int(v) for v in rng.integers(1, 9, 3))
            sigma = rng.uniform(0.1, 3.0)
            q = Tensor(sigma * rng.standard_normal((c, h, w)))
            k = Tensor(sigma * rng.standard_normal((n, c, h, w)))
            att = attention_weights(q, k).data
            worst_sum = max(worst_sum, float(np.max(np.abs(att.sum(axis=0) - 1.0))))
            if n == 1:
                # a one-element softmax is exactly 1: the open interval is only attainable for N >= 2
                single_ok &= bool((att == 1.0).all())
            else:
                interior_ok &= bool(((att > 0) & (att < 1)).all())
            draws += 1
    ok = worst_sum <= 1e-6 and interior_ok and single_ok
    record(1, "attention normalization", ok,
           f"{draws} draws, max |sum-1| = {worst_sum:.1e}, att in (0,1) for N>=2: {interior_ok}, "
           f"att == 1 for N=1: {single_ok}", clk.elapsed, 5)


def test_02_single_reference_degeneracy():
    rng = np.random.default_rng(102)
    worst = 0.0
    with Clock() as clk:
        for _ in range(100):
            c_lr, c_ref, c_emb = (int(v) for v in rng.integers(1, 6, 3))
            h, w = (int(v) for v in rng.integers(2, 8, 2))
            params = register_mam(ParamStore(), "m", rng, c_lr, c_ref, c_emb)
            for t in (params.q_b, params.k_b, params.v_b):
                t.data[...] = rng.standard_normal(t.shape)
            f_lr = Tensor(rng.standard_normal((c_lr, h, w)))
            f_a = Tensor(rng.standard_normal((c_ref, h, w)))
            fused = mam_forward(f_lr, [f_a], params).data
            direct = conv2d(f_a, params.v_w, params.v_b).data
            worst = max(worst, float(np.max(np.abs(fused - direct)) / max(np.max(np.abs(direct)), 1e-300)))
    record(2, "N=1 degeneracy", worst <= 1e-12, f"100 trials, max relative diff = {worst:.1e}", clk.elapsed, 2)


def randomized_model(seed, channels=8):
    """Model whose zero-initialized tails are redrawn so every path contributes."""
    m = MrefsrModel(ModelConfig(channels=channels, res_blocks=1, seed=seed))
    rng = np.random.default_rng(seed + 1)
    for _, p in m.store.items():
        if not p.data.any():
            p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
    return m


def test_03_permutation_invariance():
    rng = np.random.default_rng(103)
    with Clock() as clk:
        model = randomized_model(3)
        group = make_groups(103, 1, lr_size=12)[0]
        offsets = [match_offsets(group.lr, r) for r in group.refs]
        base = predict(model, group.lr, group.refs, offsets).pred.data
        base_img = forward_sr(RefGroupSample(group.lr, group.refs, offsets=offsets), model)
        worst, same_bytes = 0.0, True
        for _ in range(20):
            perm = rng.permutation(5)
            refs = [group.refs[i] for i in perm]
            offs = [offsets[i] for i in perm]
            out = predict(model, group.lr, refs, offs).pred.data
            worst = max(worst, float(np.max(np.abs(out - base)) / np.max(np.abs(base))))
            same_bytes &= bool(np.array_equal(forward_sr(RefGroupSample(group.lr, refs, offsets=offs), model),
                                              base_img))
    record(3, "permutation invariance", worst <= 1e-12 and same_bytes,
           f"20 permutations, max relative diff = {worst:.1e}, quantized output identical: {same_bytes}",
           clk.elapsed, 30)


def test_04_gradient_fidelity():
    with Clock() as clk:
        errors = tiny_model_check(seed=0, lr_size=8, n_refs=2, channels=2)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    record(4, "gradient fidelity", worst < 1e-5,
           f"{len(errors)} parameters, max relative error = {worst:.1e} ({worst_name})", clk.elapsed, 60)


def test_05_safm_identity_start():
    rng = np.random.default_rng(105)
    with Clock() as clk:
        f_lr = Tensor(rng.standard_normal((4, 25, 25)))
        f_fref = Tensor(rng.standard_normal((4, 25, 25)))
        identity = bool(np.array_equal(safm_forward(f_lr, f_fref, register_safm(ParamStore(), "s", rng, 4, 4)).data,
                                       f_fref.data))
        sampled, lo, hi = 0, 2.0, 0.0
        for spread in (0.5, 2.0, 10.0, 50.0):
            params = register_safm(ParamStore(), "s", rng, 4, 4, zero_last=False)
            for w, b in params.f1:
                w.data[...] = spread * rng.standard_normal(w.shape)
                b.data[...] = spread * rng.standard_normal(b.shape)
            m = compute_masks(f_lr, f_fref, params).m_mul.data
            sampled += m.size
            lo, hi = min(lo, float(m.min())), max(hi, float(m.max()))
    ok = identity and sampled >= 10_000 and lo > 0 and hi < 2
    record(5, "SAFM identity start", ok,
           f"F_sref == F_fref exactly: {identity}; {sampled} M_mul elements in [{lo:.3g}, {hi!r}]", clk.elapsed, 2)


def test_06_metric_correctness():
    rng = np.random.default_rng(106)
    with Clock() as clk:
        y = rng.uniform(16, 200, (48, 48))
        p = psnr_y(y, y + 1.0)
        a = rgb_to_y(rng.integers(0, 256, (48, 48, 3), dtype=np.uint8))
        s = ssim_y(a, a)
        const = np.full((16, 16, 3), 131, np.uint8)
        const_ok = bool((bicubic_resize(const, 4) == 131).all())
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        up_ok = bool(np.array_equal(bicubic_resize(img, 4), quantize(kernel_sum_resize(img, 4))))
        down_ok = bool(np.array_equal(bicubic_resize(img, 0.25), quantize(kernel_sum_resize(img, 0.25))))
    ok = abs(p - 48.1308) <= 1e-3 and abs(s - 1.0) <= 1e-12 and const_ok and up_ok and down_ok
    record(6, "metric correctness", ok,
           f"PSNR(diff 1) = {p:.4f} dB, SSIM(a,a) = {s!r}, constant stays constant: {const_ok}, "
           f"kernel-sum oracle x4 / x1/4 exact: {up_ok} / {down_ok}", clk.elapsed, 5)


def test_07_builder_correctness(tmp_path):
    with Clock() as clk:
        # hand-countable manifest: exact ratios against a direct re-count
        rng = np.random.default_rng(107)
        ids = ["a", "b", "c", "d", "e"]
        doc = {"scene": "hand", "images": [{"id": i, "path": f"{i}.png", "width": 16, "height": 16} for i in ids],
               "points3d": []}
        for pid in range(80):
            seen = [i for i in ids if rng.random() < 0.5] or ["a"]
            doc["points3d"].append({"point_id": pid, "observations": [
                {"image_id": i, "x_px": 5.0, "y_px": 6.0, "depth": float(rng.integers(1, 9))} for i in seen]})
        m = write_scene(str(tmp_path / "hand"), doc, {i: rng.integers(0, 256, (16, 16, 3), np.uint8) for i in ids})
        stats_ok = all((compute_pair_stats(t, r, m).r_olp, compute_pair_stats(t, r, m).r_s) == oracle_stats(doc, t, r)
                       for t in ids for r in ids)

        # full build: composition, patch size and the duplicate filter, re-checked from provenance
        scene = load_manifest(make_scene(str(tmp_path / "scene"), seed=0, n_targets=3))
        out = str(tmp_path / "ds")
        reports = build_dataset([scene], out, BuildConfig(seed=1))
        groups = list_groups(out)
        shape_ok, dup_ok = bool(groups), True
        for d in groups:
            target, refs, labels = load_group(d)
            shape_ok &= labels == ["H", "M", "M", "L", "L"] and target.shape == (PATCH, PATCH, 3)
            shape_ok &= all(r.shape == (PATCH, PATCH, 3) for r in refs)
        for entry in read_index(os.path.join(out, "index.jsonl")):
            t_img = load_png(scene.image_path(entry["target"]["image_id"]))
            for ref in entry["refs"]:
                dup_ok &= dedup_psnr(t_img, load_png(scene.image_path(ref["image_id"]))) < DEDUP_PSNR_DB
        thresholds = (H_OVERLAP, H_SIZE, M_OVERLAP, M_SIZE, DEDUP_PSNR_DB) == (0.30, 0.9, 0.10, 0.66, 30)
        eps = 1e-9
        boundary = [classify(20, 0.30 + eps, 0.9 + eps), classify(20, 0.30, 0.95), classify(20, 0.5, 0.9),
                    classify(20, 0.10 + eps, 0.66 + eps), classify(20, 0.10, 0.95), classify(20, 0.5, 0.66),
                    classify(30, 0.9, 1.0)]
        boundary_ok = boundary == ["H", "M", "M", "M", "L", "L", "rejected"]
    ok = stats_ok and shape_ok and dup_ok and thresholds and boundary_ok
    record(7, "builder correctness", ok,
           f"pair stats vs oracle: {stats_ok}; {len(groups)} groups 1H+2M+2L at {PATCH}px: {shape_ok}; "
           f"no reference >= 30 dB: {dup_ok}; thresholds (strict) as stated: {thresholds and boundary_ok}; "
           f"rejected duplicates: {reports[0]['rejected_dup']}", clk.elapsed, 60)


@pytest.mark.slow
def test_08_toy_overfit():
    with Clock() as clk:
        groups = make_groups(0, 1, lr_size=12)
        trace = train(MrefsrModel(ModelConfig(channels=8, res_blocks=1)), groups, 2000, batch_size=1, seed=0)
        ratio = trace[-1] / trace[0]
        # determinism: a fresh run with the same seed reproduces the opening of the trace bit for bit
        again = train(MrefsrModel(ModelConfig(channels=8, res_blocks=1)), groups, 25, batch_size=1, seed=0)
        same = again == trace[:25]
    record(8, "toy overfit", ratio < 0.10 and same,
           f"L_rec {trace[0]:.4f} -> {trace[-1]:.4f} (ratio {ratio:.3f}) after 2000 Adam steps at lr 1e-4, "
           f"seeded rerun identical: {same}", clk.elapsed, 300)


@pytest.mark.slow
def test_09_monotone_n_trend(tmp_path):
    with Clock() as clk:
        model = MrefsrModel(ModelConfig(channels=8, res_blocks=1, seed=0))
        train(model, make_groups(1, 48, lr_size=12, complementary=True), 3000, batch_size=1, seed=0)
        held_out = make_groups(2, 4, lr_size=12, complementary=True)
        rows = []
        for n in range(1, 6):
            scores = [eval_group(s, model, n) for s in held_out]
            rows.append({"n_refs": n, "psnr_db": float(np.mean([p for p, _ in scores])),
                         "ssim": float(np.mean([q for _, q in scores]))})
        with open(tmp_path / "sweep.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    shape_ok = [r["n_refs"] for r in rows] == [1, 2, 3, 4, 5]
    ok = shape_ok and rows[4]["psnr_db"] >= rows[0]["psnr_db"]
    curve = ", ".join(f"n={r['n_refs']}: {r['psnr_db']:.2f}" for r in rows)
    record(9, "monotone-N trend", ok, f"held-out mean PSNR dB {curve}; delta(5-1) = "
           f"{rows[4]['psnr_db'] - rows[0]['psnr_db']:+.3f} dB", clk.elapsed, 600)


@pytest.mark.slow
def test_10_scaling_bench():
    with Clock() as clk:
        model = MrefsrModel(ModelConfig(channels=8, res_blocks=1, seed=0))
        rows = run_bench(model, [1, 2, 3, 4, 5], repeats=15, lr_size=32)
    mam = {r.n_refs: r for r in rows if r.method == "mam"}
    stitch = {r.n_refs: r for r in rows if r.method == "stitch"}
    times = [mam[n].median_s for n in range(1, 6)]
    monotone = all(b >= a for a, b in zip(times, times[1:]))
    linear = times[4] <= 5.5 * times[0]
    memory = mam[5].peak_bytes < stitch[5].peak_bytes
    record(10, "scaling bench", monotone and linear and memory,
           "median ms " + ", ".join(f"N={n}: {1e3 * t:.1f}" for n, t in enumerate(times, 1))
           + f"; t5/t1 = {times[4] / times[0]:.2f}; peak MB at N=5 mam {mam[5].peak_bytes / 1e6:.1f} "
           f"vs stitch {stitch[5].peak_bytes / 1e6:.1f}", clk.elapsed, 300)
