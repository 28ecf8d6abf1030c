"""Adversarial pretraining, linear-probe transfer, scratch baseline and the scarcity sweep."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentationSpec, augment, parse_spec, sample_threekg, threekg_matrix
from .checkpoint import Checkpoint
from .data import Dataset, labels_array, signals_array, split_dataset, subsample_fraction
from .models import N_CLASSES, Encoder, EncoderConfig, LinearProbe, MaskGeneratorConfig, make_rng
from .objectives import ObjectiveConfig, adversary_terms, encoder_loss, ntxent_loss
from .params import adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("phase", "epoch", "l_ssl", "l_sparse", "accuracy", "fraction", "seed", "wall_time_s")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    lr_encoder: float = 1e-4
    lr_adversary: float = 1e-4
    batch_size: int = 32
    grad_accum_batches: int = 4
    max_epochs: int = 100
    early_stop_patience: int = 10
    min_delta: float = 1e-3
    n_masks: int = 2
    augmentation: str = "adversarial"
    seed: int = 0
    adversary_first: bool = False
    mask_base_channels: int = 8
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size * self.grad_accum_batches

    @property
    def spec(self) -> AugmentationSpec:
        return parse_spec(self.augmentation)

    def mask_config(self) -> MaskGeneratorConfig | None:
        if not self.uses_adversary:
            return None
        return MaskGeneratorConfig(in_leads=self.encoder.in_leads, base_channels=self.mask_base_channels,
                                   n_masks=self.n_masks)

    @property
    def uses_adversary(self) -> bool:
        return "adversarial" in self.spec.name.split("+")


@dataclass
class TransferConfig:
    lr: float = 0.01
    batch_size: int = 256
    task: str = "arrhythmia"
    max_epochs: int = 50
    fraction: float = 1.0
    seed: int = 0
    split_seed: int = 0
    scratch_lr: float = 1e-3

    def __post_init__(self):
        if self.task not in N_CLASSES:
            raise ValueError(f"task must be one of {sorted(N_CLASSES)}, got {self.task!r}")


@dataclass
class MetricsRow:
    phase: str
    epoch: int
    l_ssl: float | None = None
    l_sparse: float | None = None
    accuracy: float | None = None
    fraction: float | None = None
    seed: int | None = None
    wall_time_s: float | None = None

    def as_csv(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(round(v, 8))
            return str(v)

        return [fmt(getattr(self, f)) for f in METRIC_FIELDS]


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(row.as_csv())


# ------------------------------------------------------------- pretraining

_POST_ADDITIVE = ("gaussian", "powerline", "wander", "shift")


def _split_chain(spec: AugmentationSpec):
    """Split a chain into (numpy transforms before masking, uses_adversary, transforms after masking)."""
    specs = spec.params["specs"] if spec.kind == "compose" else [spec]
    kinds = [s.kind for s in specs]
    if "adversarial" not in kinds:
        return specs, False, []
    i = kinds.index("adversarial")
    post = specs[i + 1 :]
    for s in post:
        if s.kind not in ("threekg",) + _POST_ADDITIVE:
            raise ValueError(f"{s.kind} cannot follow adversarial masking; put it before 'adversarial'")
    return specs[:i], True, post


def _make_post(post_specs, x_masked: np.ndarray, rng, fs):
    """Freeze the randomness of the post-mask chain into a differentiable closure."""
    if not post_specs:
        return None
    steps = []
    for s in post_specs:
        if s.kind == "threekg":
            mats = np.stack([threekg_matrix(*sample_threekg(s, rng)) for _ in range(len(x_masked))])
            steps.append(("matmul", mats.astype(np.float32)))
        else:
            noise = np.stack([augment(x, s, rng, fs) - x for x in x_masked])
            steps.append(("add", noise.astype(np.float32)))

    def post(x: Tensor) -> Tensor:
        for op, arr in steps:
            x = T.matmul(Tensor(arr), x) if op == "matmul" else x + Tensor(arr)
        return x

    return post


def accumulate_gradients(paramsets, loss_fn, batches) -> list:
    """Zero grads, then back-propagate ``loss_fn(b) / len(batches)`` for each batch.

    The summed gradients equal those of the mean loss over the window.
    Returns the unscaled per-batch loss values.
    """
    for ps in paramsets:
        ps.zero_grad()
    losses = []
    for b in batches:
        loss = loss_fn(b)
        (loss * (1.0 / len(batches))).backward()
        losses.append(loss.item())
    return losses


class EarlyStopper:
    """Signals a stop after ``patience`` consecutive values that fail to beat the best by ``min_delta``."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience, self.min_delta = patience, min_delta
        self.best, self.bad = math.inf, 0

    def update(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.bad = value, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


class _Pretrainer:
    def __init__(self, config: PretrainConfig, ckpt: Checkpoint, records):
        self.cfg = config
        self.ckpt = ckpt
        self.X = signals_array(records)
        self.fs = records[0].sampling_rate_hz
        ss = np.random.SeedSequence(config.seed).spawn(2)
        self.rng = np.random.Generator(np.random.Philox(ss[1]))
        self.pre, self.adversarial, self.post_specs = _split_chain(config.spec)

    def _pre(self, xb):
        if not self.pre:
            return xb
        out = xb.copy()
        for spec in self.pre:
            out = np.stack([augment(x, spec, self.rng, self.fs) for x in out])
        return out

    def batches(self):
        n, bs = len(self.X), self.cfg.batch_size
        perm = self.rng.permutation(n)
        for start in range(0, n, bs):
            idx = np.sort(perm[start : start + bs])
            if len(idx) >= 2:
                yield self.X[idx]

    def _batch_context(self, xb):
        ctx = {"x": xb}
        if self.adversarial:
            ctx["index"] = int(self.rng.integers(self.cfg.n_masks)) if self.cfg.n_masks < 12 else None
            ctx["x_pre"] = self._pre(xb)
            # post-chain randomness is drawn against the clean pre-mask batch shape
            ctx["post"] = _make_post(self.post_specs, ctx["x_pre"], self.rng, self.fs)
        else:
            ctx["x_aug"] = self._pre(xb)
        return ctx

    def _encoder_batch_loss(self, ctx):
        enc, proj, cfg = self.ckpt.encoder, self.ckpt.projector, self.cfg
        if self.adversarial:
            return encoder_loss(Tensor(ctx["x_pre"]), enc, proj, self.ckpt.mask_model, None, cfg.objective,
                                index=ctx["index"], post=ctx["post"], clean=Tensor(ctx["x"]))
        z = proj(enc(Tensor(ctx["x"]), "train"))
        z_aug = proj(enc(Tensor(ctx["x_aug"]), "train"))
        return ntxent_loss(z, z_aug, cfg.objective.temperature, cfg.objective.include_positive)

    def encoder_step(self, window):
        enc, proj = self.ckpt.encoder, self.ckpt.projector
        losses = accumulate_gradients([enc.params, proj.params], self._encoder_batch_loss, window)
        adam_step(enc.params, self.cfg.lr_encoder)
        adam_step(proj.params, self.cfg.lr_encoder)
        return losses

    def adversary_step(self, window):
        cfg, ck = self.cfg, self.ckpt
        sparse = []

        def batch_loss(ctx):
            l_ssl, l_sparse = adversary_terms(Tensor(ctx["x_pre"]), ck.encoder, ck.projector, ck.mask_model, None,
                                              cfg.objective, index=ctx["index"], post=ctx["post"],
                                              clean=Tensor(ctx["x"]))
            sparse.append(l_sparse.item())
            return l_sparse * cfg.objective.sparse_weight - l_ssl

        accumulate_gradients([ck.mask_model.params], batch_loss, window)
        adam_step(ck.mask_model.params, cfg.lr_adversary)
        return sparse

    def epoch(self):
        ssl, sparse = [], []
        window = []
        batches = list(self.batches())
        for i, xb in enumerate(batches):
            window.append(self._batch_context(xb))
            if len(window) == self.cfg.grad_accum_batches or i == len(batches) - 1:
                if self.adversarial and self.cfg.adversary_first:
                    sparse += self.adversary_step(window)
                    ssl += self.encoder_step(window)
                else:
                    ssl += self.encoder_step(window)
                    if self.adversarial:
                        sparse += self.adversary_step(window)
                window = []
        return float(np.mean(ssl)), (float(np.mean(sparse)) if sparse else None)


def adversary_only(config: PretrainConfig, checkpoint: Checkpoint, dataset: Dataset, steps: int) -> list:
    """Run `steps` mask-generator updates (one batch each) with the encoder held fixed.

    Returns the sparse penalty of every step. The checkpoint's mask model is updated in place.
    """
    if checkpoint.mask_model is None:
        raise ValueError("checkpoint has no mask model")
    trainer = _Pretrainer(replace(config, augmentation="adversarial"), checkpoint, dataset.records)
    out = []
    while len(out) < steps:
        for xb in trainer.batches():
            out += trainer.adversary_step([trainer._batch_context(xb)])
            if len(out) == steps:
                break
    return out


def pretrain(config: PretrainConfig, dataset: Dataset, record_wall_time: bool = True,
             on_epoch=None) -> Checkpoint:
    """Alternating min-max pretraining; baseline augmentations skip the adversary.

    Stops after ``max_epochs`` or when epoch-mean L_SSL has not improved by
    ``min_delta`` for ``early_stop_patience`` epochs.
    """
    records = dataset.subset("train")
    if not records:
        raise ValueError("dataset has no training records")
    ckpt = Checkpoint.initialize(config.encoder, config.mask_config(), config.seed, config.spec.name)
    trainer = _Pretrainer(config, ckpt, records)
    stopper = EarlyStopper(config.early_stop_patience, config.min_delta)
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        l_ssl, l_sparse = trainer.epoch()
        if not math.isfinite(l_ssl) or (l_sparse is not None and not math.isfinite(l_sparse)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: l_ssl={l_ssl}, l_sparse={l_sparse}")
        ckpt.epoch = epoch
        row = MetricsRow("pretrain", epoch, l_ssl, l_sparse, seed=config.seed,
                         wall_time_s=time.perf_counter() - t0 if record_wall_time else None)
        ckpt.metrics.append(row)
        log.info("epoch %d l_ssl=%.4f l_sparse=%s", epoch, l_ssl, l_sparse)
        if on_epoch is not None:
            on_epoch(row)
        if stopper.update(l_ssl):
            log.info("early stop at epoch %d (no L_SSL improvement for %d epochs)", epoch, stopper.bad)
            break
    return ckpt


# ---------------------------------------------------------------- transfer


def encode_features(encoder: Encoder, records, batch_size: int = 256) -> np.ndarray:
    X = signals_array(records)
    out = []
    with T.no_grad():
        for s in range(0, len(X), batch_size):
            out.append(encoder(Tensor(X[s : s + batch_size]), "eval").data)
    return np.concatenate(out)


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1
    return -(T.log_softmax(logits, axis=1) * onehot).sum(axis=1).mean()


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("cannot score an empty split")
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


def predict(probe: LinearProbe, features: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return probe(Tensor(features)).data.argmax(axis=1)


def evaluate(probe: LinearProbe, encoder: Encoder, records, task: str) -> float:
    """Top-1 accuracy in [0, 1] of ``probe`` on frozen ``encoder`` features."""
    if not records:
        raise ValueError("cannot evaluate on an empty split")
    return accuracy(predict(probe, encode_features(encoder, records)), labels_array(records, task))


def _iterate(n, batch_size, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


def feature_standardizer(f: np.ndarray):
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    return mu, np.where(sd > 1e-6, sd, 1.0).astype(f.dtype)


def fold_standardizer(probe: LinearProbe, mu, sd):
    """Absorb ``(f - mu) / sd`` into the probe so it acts on raw features (still one affine map)."""
    w, b = probe.params["fc.weight"].data, probe.params["fc.bias"].data
    w /= sd[None, :]
    b -= w @ mu


def train_probe(f_train, y_train, f_val, y_val, n_classes: int, config: TransferConfig, rng) -> tuple:
    """Adam-trained linear probe with best-validation-accuracy selection. Returns (probe, val_acc)."""
    probe = LinearProbe(f_train.shape[1], n_classes, rng)
    mu, sd = feature_standardizer(f_train)
    f_train, f_val = (f_train - mu) / sd, (f_val - mu) / sd
    best_acc, best_state = -1.0, None
    for _ in range(config.max_epochs):
        for idx in _iterate(len(f_train), config.batch_size, rng):
            probe.params.zero_grad()
            cross_entropy(probe(Tensor(f_train[idx])), y_train[idx]).backward()
            adam_step(probe.params, config.lr)
        acc = accuracy(predict(probe, f_val), y_val)
        if acc > best_acc:
            best_acc, best_state = acc, {k: v.copy() for k, v in probe.params.state().items()}
    probe.params.load_state(best_state)
    fold_standardizer(probe, mu, sd)
    return probe, best_acc


@dataclass
class TransferResult:
    probe: LinearProbe
    test_accuracy: float
    val_accuracy: float
    n_train: int


def _transfer_splits(dataset: Dataset, config: TransferConfig):
    ds = dataset if dataset.split else split_dataset(dataset, seed=config.split_seed)
    train = subsample_fraction(ds.subset("train"), config.fraction, config.seed, stratify=config.task)
    return train, ds.subset("val"), ds.subset("test")


def transfer_train(config: TransferConfig, checkpoint: Checkpoint, dataset: Dataset) -> TransferResult:
    """Linear probe on the frozen checkpoint encoder; the projector is not used."""
    train, val, test = _transfer_splits(dataset, config)
    enc = checkpoint.encoder
    ys = [labels_array(s, config.task) for s in (train, val, test)]
    fs = [encode_features(enc, s) for s in (train, val, test)]
    rng = make_rng(config.seed)
    probe, val_acc = train_probe(fs[0], ys[0], fs[1], ys[1], N_CLASSES[config.task], config, rng)
    return TransferResult(probe, accuracy(predict(probe, fs[2]), ys[2]), val_acc, len(train))


def train_scratch(config: TransferConfig, dataset: Dataset, encoder_config: EncoderConfig | None = None) -> float:
    """Encoder + linear head trained end to end on the labelled split only; returns test accuracy."""
    train, val, test = _transfer_splits(dataset, config)
    rng = make_rng(config.seed)
    enc = Encoder(encoder_config or EncoderConfig(), rng)
    probe = LinearProbe(enc.config.hidden_dim, N_CLASSES[config.task], rng)
    Xtr, ytr = signals_array(train), labels_array(train, config.task)
    yval, ytest = labels_array(val, config.task), labels_array(test, config.task)
    best_acc, best_test = -1.0, 0.0
    for _ in range(config.max_epochs):
        for idx in _iterate(len(Xtr), config.batch_size, rng):
            if len(idx) < 2:
                continue
            enc.params.zero_grad()
            probe.params.zero_grad()
            cross_entropy(probe(enc(Tensor(Xtr[idx]), "train")), ytr[idx]).backward()
            adam_step(enc.params, config.scratch_lr)
            adam_step(probe.params, config.scratch_lr)
        acc = accuracy(predict(probe, encode_features(enc, val)), yval)
        if acc > best_acc:
            best_acc = acc
            best_test = accuracy(predict(probe, encode_features(enc, test)), ytest)
    return best_test


# ------------------------------------------------------------------- sweep


def _run_trial(args):
    name, ckpt, dataset, cfg, encoder_config = args
    if ckpt is None:
        acc = train_scratch(cfg, dataset, encoder_config)
    else:
        acc = transfer_train(cfg, ckpt, dataset).test_accuracy
    return {"augmentation": name, "task": cfg.task, "fraction": cfg.fraction, "seed": cfg.seed, "accuracy": acc}


def scarcity_sweep(checkpoints: dict, dataset: Dataset, fractions=(1.0, 0.1, 0.01), tasks=("arrhythmia", "gender"),
                   seeds=(0, 1, 2), scratch: bool = False, base: TransferConfig | None = None,
                   encoder_config: EncoderConfig | None = None, workers: int = 1) -> list:
    """Every (checkpoint x fraction x task x seed) trial; returns one dict per trial.

    The split is fixed by ``base.split_seed`` so the test set is identical across trials.
    """
    if not checkpoints and not scratch:
        raise ValueError("need at least one checkpoint (or scratch=True)")
    if not fractions:
        raise ValueError("need at least one fraction")
    base = base or TransferConfig()
    ds = dataset if dataset.split else split_dataset(dataset, seed=base.split_seed)
    arms = list(checkpoints.items())
    if scratch:
        arms.append(("scratch", None))
    if encoder_config is None and checkpoints:
        encoder_config = next(iter(checkpoints.values())).encoder.config
    jobs = []
    for name, ckpt in arms:
        for task in tasks:
            for fraction in fractions:
                for seed in seeds:
                    kw = {f.name: getattr(base, f.name) for f in fields(base)}
                    kw.update(task=task, fraction=fraction, seed=seed)
                    jobs.append((name, ckpt, ds, TransferConfig(**kw), encoder_config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_trial, jobs))
    return [_run_trial(j) for j in jobs]


def summarize(results: list) -> list:
    """Mean and std (percent) per (augmentation, task, fraction), in first-seen order."""
    cells: dict = {}
    for r in results:
        cells.setdefault((r["augmentation"], r["task"], r["fraction"]), []).append(r["accuracy"])
    out = []
    for (aug, task, frac), accs in cells.items():
        a = 100 * np.asarray(accs)
        out.append({"augmentation": aug, "task": task, "fraction": frac, "n_seeds": len(a),
                    "mean": float(a.mean()), "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0})
    return out


def write_sweep_outputs(results: list, out_dir):
    """trials.csv (one row per trial), curves.csv (mean/std per cell) and table.csv (augmentations by task and fraction)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["augmentation", "task", "fraction", "seed", "accuracy_pct"])
        for r in results:
            w.writerow([r["augmentation"], r["task"], r["fraction"], r["seed"], f"{100 * r['accuracy']:.4f}"])
    cells = summarize(results)
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["augmentation", "task", "fraction", "n_seeds", "mean_pct", "std_pct"])
        for c in cells:
            w.writerow([c["augmentation"], c["task"], c["fraction"], c["n_seeds"], f"{c['mean']:.4f}", f"{c['std']:.4f}"])
    columns = list(dict.fromkeys((c["task"], c["fraction"]) for c in cells))
    rows = list(dict.fromkeys(c["augmentation"] for c in cells))
    lookup = {(c["augmentation"], c["task"], c["fraction"]): c for c in cells}
    with open(out_dir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["augmentation"] + [f"{task} {100 * frac:g}% DS" for task, frac in columns])
        for aug in rows:
            cellv = []
            for task, frac in columns:
                c = lookup.get((aug, task, frac))
                cellv.append(f"{c['mean']:.2f} ± {c['std']:.2f}" if c else "")
            w.writerow([aug] + cellv)
    return cells
