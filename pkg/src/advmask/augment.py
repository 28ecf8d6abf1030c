"""Baseline ECG augmentations and adversarial-mask application.

All baseline transforms act on one record ``x[leads, D]`` (numpy) and draw
randomness only from the generator passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from . import tensor as T
from .objectives import apply_adversarial_mask

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

# Dower transform, VCG (X, Y, Z) -> leads I, II, V1..V6 (Dower et al. 1980/1988).
DOWER = np.array([
    [0.632, -0.235, 0.059],   # I
    [0.235, 1.066, -0.132],   # II
    [-0.515, 0.157, -0.917],  # V1
    [0.044, 0.164, -1.387],   # V2
    [0.882, 0.098, -1.277],   # V3
    [1.213, 0.127, -0.601],   # V4
    [1.125, 0.127, -0.086],   # V5
    [0.831, 0.076, 0.230],    # V6
])

# Inverse Dower (Edenbrandt & Pahlm 1988), leads I, II, V1..V6 -> VCG (X, Y, Z).
INVERSE_DOWER = np.array([
    [0.156, -0.010, -0.172, -0.074, 0.122, 0.231, 0.239, 0.194],
    [-0.227, 0.887, 0.057, -0.019, -0.106, -0.022, 0.041, 0.048],
    [0.022, 0.102, -0.229, -0.310, -0.246, -0.063, 0.055, 0.108],
])

# rows of the 12-lead order that are linearly independent (I, II, V1..V6)
_INDEPENDENT = [0, 1, 6, 7, 8, 9, 10, 11]

# I, II, V1..V6 -> all 12 leads (Einthoven / Goldberger relations)
EXPAND_12 = np.zeros((12, 8))
EXPAND_12[0, 0] = EXPAND_12[1, 1] = 1
EXPAND_12[2] = [-1, 1, 0, 0, 0, 0, 0, 0]          # III = II - I
EXPAND_12[3] = [-0.5, -0.5, 0, 0, 0, 0, 0, 0]     # aVR = -(I + II) / 2
EXPAND_12[4] = [1, -0.5, 0, 0, 0, 0, 0, 0]        # aVL = I - II / 2
EXPAND_12[5] = [-0.5, 1, 0, 0, 0, 0, 0, 0]        # aVF = II - I / 2
for _i in range(6):
    EXPAND_12[6 + _i, 2 + _i] = 1

DEFAULTS = {
    "gaussian": {"sigma": 0.05},
    "powerline": {"amp_max": 0.5, "f_p": 50.0, "n_harmonics": 1, "uniform_phase": False},
    "stft": {"alpha": 5.0, "beta": 2.0, "window": 64, "hop": 32, "beta_mask": True},
    "wander": {"c_mean": 1.0, "c_std": 0.5, "amp_max": 0.5, "df_low": 0.01, "df_high": 0.2,
               "n_terms": 3, "uniform_phase": False},
    "shift": {"p": 0.2, "factor_mean": -0.5, "factor_std": 0.5},
    "mask": {"p": 0.2},
    "blockmask": {"p": 0.2},
    "peakmask": {"complement_prob": 0.5},
    "threekg": {"theta_max_deg": 45.0, "s_min": 1.0, "s_max": 1.5},
    "adversarial": {"gamma": 25.0},
    "compose": {"specs": []},
}
KINDS = tuple(DEFAULTS)


@dataclass
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ValueError(f"unknown augmentation {self.kind!r}; valid: {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.params = {**DEFAULTS[self.kind], **self.params}
        p = self.params
        if "p" in p and not 0 <= p["p"] <= 1:
            raise ValueError(f"{self.kind}: probability p={p['p']} outside [0, 1]")
        if p.get("sigma", 0) < 0:
            raise ValueError("gaussian: sigma must be >= 0")
        if self.kind == "threekg" and not 1 <= p["s_min"] <= p["s_max"]:
            raise ValueError("threekg: need 1 <= s_min <= s_max")
        if self.kind == "compose":
            p["specs"] = [s if isinstance(s, AugmentationSpec) else parse_spec(s) for s in p["specs"]]

    @property
    def name(self) -> str:
        if self.kind == "compose":
            return "+".join(s.name for s in self.params["specs"])
        return self.kind

    def to_dict(self) -> dict:
        if self.kind == "compose":
            return {"kind": "compose", "params": {"specs": [s.to_dict() for s in self.params["specs"]]}}
        return {"kind": self.kind, "params": dict(self.params)}


def parse_spec(value) -> AugmentationSpec:
    """Build a spec from a name (``"blockmask"``), a chain (``"adversarial+threekg"``) or a dict."""
    if isinstance(value, AugmentationSpec):
        return value
    if isinstance(value, dict):
        return AugmentationSpec(value["kind"], dict(value.get("params", {})))
    if isinstance(value, (list, tuple)):
        return AugmentationSpec("compose", {"specs": [parse_spec(v) for v in value]})
    parts = [s.strip() for s in str(value).split("+") if s.strip()]
    if len(parts) == 1:
        return AugmentationSpec(parts[0])
    return AugmentationSpec("compose", {"specs": [AugmentationSpec(s) for s in parts]})


def _phase(rng, uniform, size=None):
    if uniform:
        return rng.uniform(0, 2 * np.pi, size)
    return rng.normal(0, 2 * np.pi, size)


# ------------------------------------------------------------------ noise


def add_stochastic_noise(x: np.ndarray, kind: str, spec: AugmentationSpec, rng: np.random.Generator,
                         sampling_rate_hz: float = 125.0) -> np.ndarray:
    p = spec.params
    leads, D = x.shape
    t = np.arange(D) / sampling_rate_hz
    if kind == "gaussian":
        noise = rng.normal(0.0, p["sigma"], size=x.shape)
    elif kind == "powerline":
        amp = rng.uniform(0, p["amp_max"])
        phi = _phase(rng, p["uniform_phase"])
        k = np.arange(1, p["n_harmonics"] + 1)[:, None]
        noise = np.broadcast_to((amp * np.cos(2 * np.pi * t * k * p["f_p"] + phi)).sum(axis=0), x.shape)
    elif kind == "wander":
        K = p["n_terms"]
        c = rng.normal(p["c_mean"], p["c_std"], size=(leads, 1))
        a = rng.uniform(0, p["amp_max"], size=(leads, K, 1))
        phi = _phase(rng, p["uniform_phase"], size=(leads, K, 1))
        df = rng.uniform(p["df_low"], p["df_high"], size=(leads, 1, 1))
        k = np.arange(1, K + 1)[None, :, None]
        noise = c * (a * np.cos(2 * np.pi * t * k * df + phi)).sum(axis=1)
    elif kind == "shift":
        n = int(round(p["p"] * D))
        factor = rng.normal(p["factor_mean"], p["factor_std"], size=leads)
        sign = rng.choice([-1.0, 1.0], size=leads)
        starts = rng.integers(0, D - n + 1, size=leads)
        noise = np.zeros_like(x, dtype=np.float64)
        scale = x.std(axis=1)
        scale = np.where(scale > 0, scale, 1.0)
        for lead in range(leads):
            noise[lead, starts[lead] : starts[lead] + n] = sign[lead] * factor[lead] * scale[lead]
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected gaussian, powerline, wander or shift")
    return (x + noise).astype(x.dtype)


# --------------------------------------------------------------- spectral


def stft_spectral_mask(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    p = spec.params
    D = x.shape[-1]
    win, hop = p["window"], p["hop"]
    if D < win:
        raise ValueError(f"stft: signal length {D} shorter than window {win}")
    _, _, Z = sps.stft(x, window="hann", nperseg=win, noverlap=win - hop, boundary="zeros", padded=True, axis=-1)
    if p["beta_mask"]:
        Z = Z * rng.beta(p["alpha"], p["beta"], size=Z.shape)
    _, rec = sps.istft(Z, window="hann", nperseg=win, noverlap=win - hop, boundary=True, time_axis=-1, freq_axis=-2)
    return rec[..., :D].astype(x.dtype)


# ------------------------------------------------------------------ masks


def random_time_mask(x: np.ndarray, kind: str, p: float, rng: np.random.Generator) -> np.ndarray:
    """``mask``: each timestep zeroed with probability p (all leads).
    ``blockmask``: one contiguous run of round(p*D) steps zeroed per lead."""
    if not 0 <= p <= 1:
        raise ValueError(f"p={p} outside [0, 1]")
    leads, D = x.shape
    if kind == "mask":
        keep = rng.random(D) >= p
        return x * keep[None, :].astype(x.dtype)
    if kind == "blockmask":
        n = int(round(p * D))
        out = x.copy()
        starts = rng.integers(0, D - n + 1, size=leads)
        for lead in range(leads):
            out[lead, starts[lead] : starts[lead] + n] = 0
        return out
    raise ValueError(f"unknown mask kind {kind!r}")


def peak_region(x: np.ndarray) -> np.ndarray:
    lead_mean = x.mean(axis=0)
    return lead_mean > lead_mean.mean()


def peak_mask(x: np.ndarray, rng: np.random.Generator, complement_prob: float = 0.5) -> np.ndarray:
    region = peak_region(x)
    if not region.any():
        return x.copy()
    if rng.random() < complement_prob:
        region = ~region
    return np.where(region[None, :], 0, x).astype(x.dtype)


# -------------------------------------------------------------------- 3KG


def rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def ecg_to_vcg(x: np.ndarray) -> np.ndarray:
    if x.shape[0] != 12:
        raise ValueError(f"VCG projection needs 12 leads in standard order, got {x.shape[0]}")
    return INVERSE_DOWER @ x[_INDEPENDENT]


def vcg_to_ecg(vcg: np.ndarray) -> np.ndarray:
    return EXPAND_12 @ (DOWER @ vcg)


def threekg_matrix(angles_rad, scale: float) -> np.ndarray:
    """12x12 linear map: ECG -> VCG -> scaled rotation -> ECG."""
    select = np.zeros((8, 12))
    select[np.arange(8), _INDEPENDENT] = 1
    return EXPAND_12 @ DOWER @ (scale * rotation_matrix(angles_rad)) @ INVERSE_DOWER @ select


def sample_threekg(spec: AugmentationSpec, rng: np.random.Generator):
    p = spec.params
    theta = np.deg2rad(p["theta_max_deg"])
    angles = rng.uniform(-theta, theta, size=3)
    scale = rng.uniform(p["s_min"], p["s_max"])
    return angles, scale


def vcg_augment_3kg(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] != 12:
        raise ValueError(f"3KG needs 12 leads in standard order, got {x.shape[0]}")
    angles, scale = sample_threekg(spec, rng)
    return (threekg_matrix(angles, scale) @ x).astype(x.dtype)


# --------------------------------------------------------------- dispatch


def augment(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator, sampling_rate_hz: float = 125.0,
            mask_model=None) -> np.ndarray:
    """Apply one augmentation (or a compose chain) to a single record ``x[leads, D]``."""
    kind, p = spec.kind, spec.params
    if kind in ("gaussian", "powerline", "wander", "shift"):
        return add_stochastic_noise(x, kind, spec, rng, sampling_rate_hz)
    if kind == "stft":
        return stft_spectral_mask(x, spec, rng)
    if kind in ("mask", "blockmask"):
        return random_time_mask(x, kind, p["p"], rng)
    if kind == "peakmask":
        return peak_mask(x, rng, p["complement_prob"])
    if kind == "threekg":
        return vcg_augment_3kg(x, spec, rng)
    if kind == "adversarial":
        if mask_model is None:
            raise ValueError("adversarial augmentation needs a trained mask generator")
        with T.no_grad():
            xt = T.Tensor(x[None])
            m = mask_model(xt, "eval")
            return apply_adversarial_mask(xt, m, p["gamma"], rng).data[0]
    if kind == "compose":
        return compose(p["specs"], x, rng, sampling_rate_hz, mask_model)
    raise ValueError(f"unknown augmentation {kind!r}")


def compose(specs, x: np.ndarray, rng: np.random.Generator, sampling_rate_hz: float = 125.0,
            mask_model=None) -> np.ndarray:
    for spec in specs:
        x = augment(x, parse_spec(spec), rng, sampling_rate_hz, mask_model)
    return x
