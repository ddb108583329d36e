"""Acceptance criteria 1-7, one PASS/FAIL line each (printed in the terminal summary)."""

import json
import math
import os
import time

import numpy as np
import pytest

import oracles
from conftest import run_pipeline
from geoalign.autograd import Tensor, log_softmax
from geoalign.data.hardneg import add_hard_negatives
from geoalign.data.leakage import leakage_check
from geoalign.data.quality import quality_filter
from geoalign.data.records import read_jsonl, write_jsonl
from geoalign.data.synth import split_seeds, synth_scene
from geoalign.gradcheck import LOSS_NAMES, loss_gradcheck
from geoalign.losses import (
    BatchEmbeddings,
    LossWeights,
    Stage,
    hna_loss,
    htc_loss,
    info_nce_symmetric,
    rpa_loss,
    total_loss,
    vic_loss,
)
from geoalign.regions import BBox, roi_align


def val(t) -> float:
    return float(t.data)


def random_batch(rng, N=4, K=3, Q=4, d=8):
    e = lambda *s: rng.standard_normal(s)
    return dict(V_g=e(N, d), T_b=e(N, d), T_d=e(N, d), V_r=e(K, d), T_neg=e(K, Q, d),
                V_crop=e(K, d), tau=rng.uniform(0.05, 1.0))


def all_losses(b):
    batch = BatchEmbeddings(V_g=Tensor(b["V_g"]), T_b=Tensor(b["T_b"]), T_d=Tensor(b["T_d"]),
                            tau=Tensor(b["tau"]), V_r=Tensor(b["V_r"]), T_r=Tensor(b["T_neg"][:, 0]),
                            T_neg=Tensor(b["T_neg"]), V_crop=Tensor(b["V_crop"]))
    total, _ = total_loss(batch, LossWeights((0.7, 1.1, 0.9, 1.3, 0.5), Stage.STAGE_II, keep_global=True))
    return np.array([
        val(info_nce_symmetric(b["V_g"], b["T_b"], b["tau"])),
        val(rpa_loss(b["V_r"], b["T_neg"][:, 0], b["tau"])),
        val(hna_loss(b["V_r"], b["T_neg"], b["tau"])),
        val(vic_loss(b["V_r"], b["V_crop"])),
        val(htc_loss(b["V_g"], b["T_b"], b["T_d"], b["tau"])),
        val(total),
    ])


def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    rows = loss_gradcheck(LOSS_NAMES, trials=20, seed=11, eps=1e-5, tol=1e-5)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in rows)
    checks = {
        "all losses covered": {r.loss for r in rows} == set(LOSS_NAMES),
        ">= 20 trials each": all(r.trials >= 20 for r in rows),
        "max rel err <= 1e-5": worst <= 1e-5,
        "runtime <= 60 s": secs <= 60.0,
    }
    assert acceptance(1, "loss gradients vs central differences", checks,
                      f"worst rel err {worst:.2e}, {secs:.1f} s")


def test_criterion_2_loss_oracles(acceptance):
    rng = np.random.default_rng(2024)
    errs = {"global": 0.0, "rpa": 0.0, "hna": 0.0, "vic": 0.0, "htc": 0.0}
    for _ in range(50):
        b = random_batch(rng)
        V_r, T_r, tau = b["V_r"], b["T_neg"][:, 0], b["tau"]
        errs["global"] = max(errs["global"], abs(val(info_nce_symmetric(b["V_g"], b["T_b"], tau))
                                                 - oracles.info_nce(b["V_g"], b["T_b"], tau)))
        errs["rpa"] = max(errs["rpa"], abs(val(rpa_loss(V_r, T_r, tau)) - oracles.info_nce(V_r, T_r, tau)))
        errs["hna"] = max(errs["hna"], abs(val(hna_loss(V_r, b["T_neg"], tau)) - oracles.hna(V_r, b["T_neg"], tau)))
        errs["vic"] = max(errs["vic"], abs(val(vic_loss(V_r, b["V_crop"])) - oracles.vic(V_r, b["V_crop"])))
        errs["htc"] = max(errs["htc"], abs(val(htc_loss(b["V_g"], b["T_b"], b["T_d"], tau))
                                           - oracles.htc(b["V_g"], b["T_b"], b["T_d"], tau)))
    I2 = np.eye(2)
    Q = 4
    V = rng.standard_normal((3, 6))
    uniform = np.repeat(rng.standard_normal((3, 1, 6)), Q, axis=1)
    E = np.eye(4)
    checks = {f"{k} oracle <= 1e-12": v <= 1e-12 for k, v in errs.items()}
    checks.update({
        "N=1 InfoNCE = 0": val(info_nce_symmetric([[0.4, -1.0]], [[2.0, 1.0]], 0.07)) == 0.0,
        "2x2 = ln(1+e^-1)": abs(val(info_nce_symmetric(I2, I2, 1.0)) - math.log(1 + math.exp(-1))) <= 1e-9,
        "uniform HNA = ln Q": abs(val(hna_loss(V, uniform, 0.07)) - math.log(Q)) <= 1e-9,
        "VIC identical = 0": abs(val(vic_loss(V, 2.0 * V))) <= 1e-12,
        "VIC orthogonal = 1": abs(val(vic_loss(E[:2], E[2:])) - 1.0) <= 1e-12,
        "VIC antiparallel = 2": abs(val(vic_loss(V, -V)) - 2.0) <= 1e-12,
    })
    assert acceptance(2, "losses vs naive loop oracles and closed forms", checks,
                      f"worst oracle err {max(errs.values()):.1e}")


def test_criterion_3_roi_align(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        d, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 17)), int(rng.integers(2, 17))
        fm = rng.standard_normal((d, h, w))
        x0, x1 = np.sort(rng.uniform(0, 1, 2))
        y0, y1 = np.sort(rng.uniform(0, 1, 2))
        box = [x0, y0, max(x1, x0 + 0.05), max(y1, y0 + 0.05)]
        box = [min(v, 1.0) for v in box]
        if box[2] - box[0] < 0.05:
            box[0] = box[2] - 0.05
        if box[3] - box[1] < 0.05:
            box[1] = box[3] - 0.05
        bins = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        got = roi_align(fm, box, bins=bins, samples_per_bin=64).data
        worst = max(worst, float(np.abs(got - oracles.dense_roi(fm, box, bins, 64)).max()))
    A, B = rng.standard_normal((2, 3, 9, 7))
    box = [0.12, 0.3, 0.71, 0.94]
    lin = np.abs(roi_align(2.5 * A - 0.75 * B, box).data
                 - (2.5 * roi_align(A, box).data - 0.75 * roi_align(B, box).data)).max()
    const = np.abs(roi_align(np.full((2, 9, 7), -1.3), box).data + 1.3).max()
    checks = {"dense oracle <= 1e-6": worst <= 1e-6, "linearity <= 1e-10": lin <= 1e-10,
              "constant field <= 1e-10": const <= 1e-10}
    assert acceptance(3, "RoIAlign vs dense bilinear oracle", checks, f"worst abs err {worst:.1e}")


def test_criterion_4_invariances(acceptance):
    rng = np.random.default_rng(4)
    perm_err = scale_err = slot_err = shift_err = 0.0
    for _ in range(50):
        N, K, Q = int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(2, 6))
        b = random_batch(rng, N=N, K=K, Q=Q)
        base = all_losses(b)
        p = dict(b)
        pn, pk = rng.permutation(N), rng.permutation(K)
        for k in ("V_g", "T_b", "T_d"):
            p[k] = b[k][pn]
        for k in ("V_r", "T_neg", "V_crop"):
            p[k] = b[k][pk]
        perm_err = max(perm_err, float(np.abs(all_losses(p) - base).max()))
        s = dict(b)
        name = ["V_g", "T_b", "T_d", "V_r", "T_neg", "V_crop"][int(rng.integers(6))]
        arr = b[name].copy()
        arr[tuple(int(rng.integers(n)) for n in arr.shape[:-1])] *= float(np.exp(rng.uniform(-6, 6)))
        s[name] = arr
        scale_err = max(scale_err, float(np.abs(all_losses(s) - base).max()))
        T = b["T_neg"].copy()
        for k in range(K):
            T[k, 1:] = b["T_neg"][k, 1 + rng.permutation(Q - 1)]
        slot_err = max(slot_err, abs(val(hna_loss(b["V_r"], T, b["tau"])) - base[2]))
        x = rng.standard_normal((3, 5))
        c = rng.uniform(-50, 50, size=(3, 1))
        shift_err = max(shift_err, float(np.abs(log_softmax(Tensor(x + c)).data
                                                - log_softmax(Tensor(x)).data).max()))
    checks = {"batch permutation <= 1e-10": perm_err <= 1e-10,
              "positive scaling <= 1e-8": scale_err <= 1e-8,
              "HNA slot permutation <= 1e-12": slot_err <= 1e-12,
              "log-softmax shift <= 1e-10": shift_err <= 1e-10}
    assert acceptance(4, "invariance suite", checks,
                      f"errs {perm_err:.1e} / {scale_err:.1e} / {slot_err:.1e} / {shift_err:.1e}")


@pytest.mark.slow
def test_criterion_5_desk_scale_training(acceptance, pipeline):
    e1, e2 = pipeline["eval1"], pipeline["eval2"]
    i2t = e2["retrieval"]["I2T"]["recall_at"]["1"]
    t2i = e2["retrieval"]["T2I"]["recall_at"]["1"]
    zs1, zs2 = e1["regioncls"]["acc_at_1"], e2["regioncls"]["acc_at_1"]
    hn = e2["hardneg"]["success"]
    with open(os.path.join(pipeline["s2"], "metrics.jsonl")) as fh:
        losses = [json.loads(line)["loss"] for line in fh][:50]
    slope = float(np.polyfit(np.arange(len(losses)), losses, 1)[0])
    train = [r for r in read_jsonl(os.path.join(pipeline["data"], "dataset.jsonl")) if r.split == "train"]
    checks = {
        "512 train / 128 test": len(train) == 512 and e2["n_images"] == 128,
        "I2T R@1 >= 0.08": i2t >= 0.08,
        "T2I R@1 >= 0.08": t2i >= 0.08,
        "zero-shot Stage II >= 1.5x Stage I": zs2 >= 1.5 * zs1,
        "hard-negative success >= 0.70": hn >= 0.70,
        "wall clock <= 1800 s": pipeline["seconds"] <= 1800.0,
        "Stage II early loss slope < 0": slope < 0.0,
    }
    detail = (f"R@1 I2T {i2t:.4f} T2I {t2i:.4f}; zero-shot {zs1:.4f} -> {zs2:.4f}; "
              f"hardneg {hn:.4f}; {pipeline['seconds']:.0f} s")
    assert acceptance(5, "desk-scale training sanity", checks, detail)


def test_criterion_6_pipeline_conformance(acceptance, tmp_path):
    rec, pixels = synth_scene(0)
    rep = quality_filter(pixels, [BBox(0.0, 0.0, 1.0, 0.8)])
    pairs = [synth_scene(s, split=sp) for sp, s in split_seeds(200, 0, 0.8)]
    train = [(r, p) for r, p in pairs if r.split == "train"]
    test = [(r, p) for r, p in pairs if r.split == "test"]
    leak = leakage_check([r for r, _ in train], [r for r, _ in test],
                         [p for _, p in train], [p for _, p in test])
    records = add_hard_negatives([synth_scene(s)[0] for s in range(1000)], q=4, seed=6)
    for i, r in enumerate(records):
        r.split = "test" if i % 5 == 0 else "train"
    path = tmp_path / "roundtrip.jsonl"
    write_jsonl(records, path)
    back = read_jsonl(path)
    checks = {
        "80% region rejected": rep.verdict == "reject" and rep.reasons == ["region_area"],
        "zero exact duplicates": leak.exact_duplicate_pairs == [],
        "1000-record round trip": len(back) == 1000 and [r.to_dict() for r in back] == [r.to_dict() for r in records],
    }
    assert acceptance(6, "pipeline conformance", checks,
                      f"region fraction {rep.max_region_area_fraction:.2f}, {len(leak.exact_duplicate_pairs)} duplicates")


@pytest.mark.slow
def test_criterion_7_determinism(acceptance, pipeline, tmp_path_factory):
    other = run_pipeline(str(tmp_path_factory.mktemp("pipeline_b")))

    def same_bytes(rel):
        with open(os.path.join(pipeline["raw"], "..", rel), "rb") as a, \
                open(os.path.join(other["raw"], "..", rel), "rb") as b:
            return a.read() == b.read()

    checks = {
        "Stage I checkpoint bytes": same_bytes("s1/checkpoint.gacp"),
        "Stage II checkpoint bytes": same_bytes("s2/checkpoint.gacp"),
        "Stage I metrics": same_bytes("s1/metrics.jsonl"),
        "Stage II metrics": same_bytes("s2/metrics.jsonl"),
        "eval JSON": same_bytes("e1/eval.json") and same_bytes("e2/eval.json"),
        "dataset JSONL": same_bytes("data/dataset.jsonl"),
    }
    assert acceptance(7, "two seeded runs are byte-identical", checks)
