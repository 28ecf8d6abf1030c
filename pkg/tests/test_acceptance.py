"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py`` (the report lines are printed
even when pytest captures output). Tolerances are pinned as module constants.
Criteria 4 and 5 train small models and take several minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from gradcases import ALL_CASES, random_graph, sample_inputs

from advmask import tensor as T
from advmask.augment import (AugmentationSpec, add_stochastic_noise, augment, ecg_to_vcg, random_time_mask,
                             rotation_matrix, sample_threekg, stft_spectral_mask, vcg_augment_3kg, vcg_to_ecg)
from advmask.checkpoint import Checkpoint
from advmask.cli import main
from advmask.config import RunConfig
from advmask.data import generate_synthetic_ecg, signals_array
from advmask.gradcheck import check_gradients
from advmask.models import EncoderConfig, make_rng
from advmask.objectives import ntxent_loss, soft_binarize, sparse_penalty
from advmask.tensor import Tensor
from advmask.training import PretrainConfig, TransferConfig, adversary_only, pretrain, train_scratch, transfer_train

GRAD_REL_TOL = 1e-3
GRAD_MIN_INSTANCES = 20
GRAD_MAX_SECONDS = 120
NTXENT_TOL = 1e-5
PENALTY_SYM_TOL = 1e-6
BERNOULLI_P, BERNOULLI_TOL, BERNOULLI_DRAWS = 0.2, 0.01, 100_000
STFT_RMS_TOL = 1e-3
VCG_NORM_TOL = 1e-5
ADV_STEPS, ADV_PRETRAIN_EPOCHS, ADV_MAX_SECONDS = 50, 5, 600
PROBE_MARGIN_PTS = 10.0
SEEDS = (0, 1, 2)

# Desk learning rate for criteria 4 and 5. The default 1e-4 leaves the desk-scale
# encoder near chance after a few epochs; the defaults themselves are checked in criterion 6.
DESK_LR = 1e-3
DESK_PRETRAIN_EPOCHS = 20


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


# ------------------------------------------------------------------ 1


def test_criterion_1_autodiff(capsys):
    start = time.perf_counter()
    errors = {}
    for name, case in ALL_CASES.items():
        for seed in (0, 1):
            errors[f"{name}/{seed}"] = check_gradients(case[0], sample_inputs(case, seed), h=1e-3)
    for seed in range(5):
        fn, arrays = random_graph(seed)
        errors[f"graph/{seed}"] = check_gradients(fn, arrays)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    bad = [k for k, v in errors.items() if v > GRAD_REL_TOL]
    ok = not bad and len(errors) >= GRAD_MIN_INSTANCES and elapsed < GRAD_MAX_SECONDS
    report(capsys, 1, "finite-difference gradients", ok,
           f"{len(errors)} instances, max rel err {errors[worst]:.2e} ({worst}), failing {bad}, {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def _brute_ntxent(z, za, tau):
    total = 0.0
    for i in range(len(z)):
        sims = [float(np.dot(z[i], za[j]) / (np.linalg.norm(z[i]) * np.linalg.norm(za[j]))) for j in range(len(z))]
        denom = sum(math.exp(s / tau) for j, s in enumerate(sims) if j != i)
        total += -(sims[i] / tau - math.log(denom))
    return total / len(z)


def test_criterion_2_loss_oracles(capsys):
    rng = np.random.default_rng(2)
    nt_err = 0.0
    for B in (2, 4, 8):
        z, za = rng.normal(size=(B, 16)), rng.normal(size=(B, 16))
        got = ntxent_loss(Tensor(z, dtype=np.float64), Tensor(za, dtype=np.float64), 0.1).item()
        nt_err = max(nt_err, abs(got - _brute_ntxent(z, za, 0.1)))
    b0 = soft_binarize(Tensor([0.0], dtype=np.float64), 25.0).item()
    b_direct = 1 / (1 + math.exp(-25.0 * (0.0 - 0.5)))
    p_half = sparse_penalty(Tensor(np.full((2, 2, 16), 0.5), dtype=np.float64)).item()
    p_quarter = sparse_penalty(Tensor(np.full((2, 2, 16), 0.25), dtype=np.float64)).item()
    m = rng.random((4, 3, 32))
    sym = abs(sparse_penalty(Tensor(m, dtype=np.float64)).item() - sparse_penalty(Tensor(1 - m, dtype=np.float64)).item())
    ok = (nt_err <= NTXENT_TOL and abs(b0 - b_direct) <= 1e-12 and abs(b0 - 3.73e-6) <= 1e-8
          and abs(p_half - 1.0) <= 1e-9 and abs(p_quarter - 1.4142) <= 1e-4 and sym <= PENALTY_SYM_TOL)
    report(capsys, 2, "loss oracles", ok,
           f"ntxent max err {nt_err:.1e}; b(0)={b0:.4e}; penalty(0.5)={p_half:.6f}, "
           f"penalty(0.25)={p_quarter:.4f}; symmetry err {sym:.1e}")


# ------------------------------------------------------------------ 3


def test_criterion_3_augmentation_invariants(capsys):
    x = np.random.default_rng(3).normal(size=(12, 256))
    zero = {
        "gaussian": {"sigma": 0.0}, "powerline": {"amp_max": 0.0}, "wander": {"amp_max": 0.0},
        "shift": {"factor_mean": 0.0, "factor_std": 0.0}, "mask": {"p": 0.0}, "blockmask": {"p": 0.0},
    }
    identity = all(np.array_equal(augment(x, AugmentationSpec(k, p), make_rng(1)), x) for k, p in zero.items())
    masked = random_time_mask(np.ones((1, BERNOULLI_DRAWS)), "mask", BERNOULLI_P, make_rng(2))
    rate = float(np.mean(masked == 0))
    stft = stft_spectral_mask(x, AugmentationSpec("stft", {"beta_mask": False}), make_rng(3))
    rms = float(np.sqrt(np.mean((stft - x) ** 2)))
    spec = AugmentationSpec("threekg", {"s_max": 1.0})
    angles, scale = sample_threekg(spec, make_rng(4))
    vcg = ecg_to_vcg(x)
    moved = scale * rotation_matrix(angles) @ vcg
    norm_err = float(np.max(np.abs(np.linalg.norm(moved, axis=0) - np.linalg.norm(vcg, axis=0))))
    same_path = np.allclose(vcg_augment_3kg(x, spec, make_rng(4)), vcg_to_ecg(moved), atol=1e-9)
    noise = add_stochastic_noise(np.zeros((12, 1000)), "powerline", AugmentationSpec("powerline", {"amp_max": 0.5}),
                                 make_rng(5), 500.0)
    freqs = np.fft.rfftfreq(1000, 1 / 500.0)
    peak = float(freqs[np.abs(np.fft.rfft(noise[0])).argmax()])
    ok = (identity and abs(rate - BERNOULLI_P) <= BERNOULLI_TOL and rms <= STFT_RMS_TOL
          and scale == 1.0 and norm_err <= VCG_NORM_TOL and same_path and peak == 50.0)
    report(capsys, 3, "augmentation invariants", ok,
           f"zero-amplitude identity {identity}; mask rate {rate:.4f}; STFT rms {rms:.1e}; "
           f"3KG VCG norm err {norm_err:.1e}; powerline peak {peak:g} Hz")


# ------------------------------------------------------------------ 4


def mask_hardness(ckpt, X, seed, gamma=25.0, batch=32):
    """Mean L_SSL under the learned masks and under Bernoulli masks with the same per-sample keep fraction."""
    rng = make_rng(seed)
    perm = rng.permutation(len(X))
    learned, matched = [], []
    enc, proj, gen = ckpt.encoder, ckpt.projector, ckpt.mask_model
    with T.no_grad():
        for s in range(0, len(X), batch):
            x = X[np.sort(perm[s : s + batch])]
            z = proj(enc(Tensor(x), "frozen"))
            masks = soft_binarize(gen(Tensor(x), "eval"), gamma).data
            for k in range(masks.shape[1]):
                m = masks[:, k]
                keep = m.mean(axis=1, keepdims=True)
                rand = (rng.random(m.shape) < keep).astype(np.float32)
                learned.append(ntxent_loss(z, proj(enc(Tensor(x * m[:, None]), "frozen"))).item())
                matched.append(ntxent_loss(z, proj(enc(Tensor(x * rand[:, None]), "frozen"))).item())
    return float(np.mean(learned)), float(np.mean(matched))


def test_criterion_4_adversarial_dynamic(capsys):
    start = time.perf_counter()
    ds = generate_synthetic_ecg(512, seed=1)
    X = signals_array(ds.records)
    rows, wins = [], 0
    for seed in SEEDS:
        cfg = PretrainConfig(max_epochs=ADV_PRETRAIN_EPOCHS, seed=seed, lr_encoder=DESK_LR, lr_adversary=DESK_LR)
        ckpt = pretrain(cfg, ds, record_wall_time=False)
        enc_sum = ckpt.encoder.params.checksum()
        adversary_only(cfg, ckpt, ds, ADV_STEPS)
        assert ckpt.encoder.params.checksum() == enc_sum
        adv, rand = mask_hardness(ckpt, X, 100 + seed)
        wins += adv > rand
        rows.append(f"seed {seed}: {adv:.3f} vs {rand:.3f}")
    elapsed = time.perf_counter() - start
    ok = wins == len(SEEDS) and elapsed <= ADV_MAX_SECONDS
    report(capsys, 4, "adversarial masks beat matched random masks", ok,
           f"L_SSL learned vs random {'; '.join(rows)}; {wins}/3 seeds; {elapsed:.0f}s")


# ------------------------------------------------------------------ 5


def test_criterion_5_representation_ordering(capsys):
    pre = generate_synthetic_ecg(512, seed=1)
    downstream = generate_synthetic_ecg(1024, seed=2)
    acc = {"adv": [], "random": [], "adv_1pct": [], "scratch_1pct": []}
    for seed in SEEDS:
        cfg = PretrainConfig(augmentation="adversarial", max_epochs=DESK_PRETRAIN_EPOCHS, seed=seed,
                             lr_encoder=DESK_LR, lr_adversary=DESK_LR)
        ckpt = pretrain(cfg, pre, record_wall_time=False)
        rand = Checkpoint.initialize(EncoderConfig(), None, seed)
        full, tiny = TransferConfig(seed=seed), TransferConfig(fraction=0.01, seed=seed)
        acc["adv"].append(100 * transfer_train(full, ckpt, downstream).test_accuracy)
        acc["random"].append(100 * transfer_train(full, rand, downstream).test_accuracy)
        acc["adv_1pct"].append(100 * transfer_train(tiny, ckpt, downstream).test_accuracy)
        acc["scratch_1pct"].append(100 * train_scratch(tiny, downstream))
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    ok = mean["adv"] >= mean["random"] + PROBE_MARGIN_PTS and mean["adv_1pct"] > mean["scratch_1pct"]
    per_seed = ", ".join(f"{k} {[round(v, 1) for v in vals]}" for k, vals in acc.items())
    report(capsys, 5, "representation-quality ordering", ok,
           f"means adv {mean['adv']:.1f} vs random {mean['random']:.1f} (need +{PROBE_MARGIN_PTS:g}); "
           f"1% adv {mean['adv_1pct']:.1f} vs scratch {mean['scratch_1pct']:.1f}; per seed {per_seed}")


# ------------------------------------------------------------------ 6


EXPECTED_DEFAULTS = {
    "temperature": 0.1, "binarize_gamma": 25.0, "sparse_weight": 0.1, "pretrain_lr": 1e-4,
    "batch_size": 32, "grad_accum_batches": 4, "transfer_lr": 0.01, "transfer_batch": 256,
    "splits": [0.8, 0.1, 0.1], "fractions": [1.0, 0.1, 0.01], "seeds": 3,
}


def test_criterion_6_default_snapshot(capsys):
    d = RunConfig().to_dict()
    got = {
        "temperature": d["pretrain"]["objective"]["temperature"],
        "binarize_gamma": d["pretrain"]["objective"]["binarize_gamma"],
        "sparse_weight": d["pretrain"]["objective"]["sparse_weight"],
        "pretrain_lr": d["pretrain"]["lr_encoder"],
        "batch_size": d["pretrain"]["batch_size"],
        "grad_accum_batches": d["pretrain"]["grad_accum_batches"],
        "transfer_lr": d["transfer"]["lr"],
        "transfer_batch": d["transfer"]["batch_size"],
        "splits": d["split_fractions"],
        "fractions": d["sweep"]["fractions"],
        "seeds": d["sweep"]["seeds"],
    }
    same_lr = d["pretrain"]["lr_adversary"] == d["pretrain"]["lr_encoder"]
    diff = {k: (got[k], v) for k, v in EXPECTED_DEFAULTS.items() if got[k] != v}
    report(capsys, 6, "protocol defaults", not diff and same_lr, f"mismatches {diff}; adversary lr equal {same_lr}")


# ------------------------------------------------------------------ 7


def test_criterion_7_cli_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--n", "64", "--length", "128", "--seed", "7"]) == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["pretrain", "--data", str(data), "--out", str(out), "--max-epochs", "2", "--seed", "11"]) == 0
        outs.append(out)
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            for name in ("checkpoint.amck", "metrics.csv")}
    report(capsys, 7, "deterministic pretrain command", all(same.values()), f"byte-identical {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
