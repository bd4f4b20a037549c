"""Dataset loading, synthetic generators, and event binning.

`load_dataset` accepts either a path to a CSV file (header required, columns
``t,y`` or ``r,t,y`` or ``r1,r2,y``) or one of the built-in ids:

- ``motorcycle``: accelerometer-vs-time regression with wildly time-varying
  noise (heteroscedastic benchmark);
- ``coal``: mining-disaster event times (log-Gaussian Cox process; bin
  before modelling);
- ``banana``: two-class 2-D classification, labels in {-1, +1};
- ``binary-synthetic``: seeded 1-D classification drawn from a decaying
  sinusoid pushed through a sign function;
- ``cox2d-synthetic``: seeded event cloud on a rectangle with a smooth
  log-intensity (2-D Cox-process benchmark at desk scale);
- ``audio-synthetic``: seeded sum-of-modulated-oscillators signal matching
  the product likelihood's structure.
"""

from __future__ import annotations

import math
import pathlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

__all__ = ["RawData", "load_dataset", "bin_events", "DATASET_IDS"]

_DATA_DIR = pathlib.Path(__file__).resolve().parents[2] / "data"

DATASET_IDS = (
    "motorcycle",
    "coal",
    "banana",
    "binary-synthetic",
    "cox2d-synthetic",
    "audio-synthetic",
)


@dataclass(frozen=True)
class RawData:
    """A loaded dataset: sequential coordinate, optional space, optional y.

    For point processes (``coal``, ``cox2d-synthetic``) ``y`` is None and
    ``t`` (plus ``r`` in 2-D) holds raw event coordinates to be binned.
    """

    name: str
    t: np.ndarray
    y: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None


def _parse_csv(path: pathlib.Path) -> RawData:
    text = path.read_text().strip().splitlines()
    if not text:
        raise ValueError(f"{path}: empty file")
    header = [c.strip().lower() for c in text[0].split(",")]
    layouts = {
        ("t", "y"): ("t", "y"),
        ("r", "t", "y"): ("r", "t", "y"),
        ("r1", "r2", "y"): ("r1", "r2", "y"),
    }
    if tuple(header) not in layouts:
        raise ValueError(
            f"{path}: header must be 't,y', 'r,t,y' or 'r1,r2,y', got {text[0]!r}"
        )
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}: line {lineno}: expected {len(header)} columns")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    data = np.asarray(rows, dtype=float)
    name = path.stem
    if header == ["t", "y"]:
        return RawData(name, t=data[:, 0], y=data[:, 1])
    if header == ["r", "t", "y"]:
        return RawData(name, t=data[:, 1], y=data[:, 2], r=data[:, 0])
    return RawData(name, t=data[:, 0], y=data[:, 2], r=data[:, 1])


def _binary_synthetic(n: int = 1000, seed: int = 0) -> RawData:
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 50.0, n)
    clean = 12.0 * np.sin(4.0 * math.pi * t) / (0.25 * math.pi * t + 1.0)
    y = np.sign(clean + rng.normal(0.0, 0.25, size=n))
    y[y == 0] = 1.0
    return RawData("binary-synthetic", t=t, y=y)


def _cox2d_synthetic(seed: int = 1) -> RawData:
    """Events on [0,50] x [0,25] from a smooth bumpy log-intensity."""
    rng = np.random.default_rng(seed)
    width, height = 50.0, 25.0

    def log_intensity(t, r):
        return (
            0.4
            + 0.9 * np.sin(2.0 * math.pi * t / 25.0)
            + 0.7 * np.cos(2.0 * math.pi * r / 20.0)
            - 0.5 * ((t - 30.0) / 15.0) ** 2
        )

    # thinning: bound the intensity, draw a homogeneous cloud, keep a subset
    bound = math.exp(0.4 + 0.9 + 0.7)
    n_prop = rng.poisson(bound * width * height)
    t_prop = rng.uniform(0.0, width, n_prop)
    r_prop = rng.uniform(0.0, height, n_prop)
    keep = rng.random(n_prop) < np.exp(log_intensity(t_prop, r_prop)) / bound
    return RawData("cox2d-synthetic", t=t_prop[keep], r=r_prop[keep])


def _audio_synthetic(n: int = 2000, seed: int = 2) -> RawData:
    """Sum of three oscillators with slow positive amplitude envelopes."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 4.0, n)
    freqs = [4.0, 9.0, 17.0]
    signal = np.zeros(n)
    for j, freq in enumerate(freqs):
        phase = rng.uniform(0.0, 2.0 * math.pi)
        envelope = np.log1p(
            np.exp(1.5 * np.sin(2.0 * math.pi * (0.25 + 0.15 * j) * t + j) - 0.5)
        )
        signal += envelope * np.cos(2.0 * math.pi * freq * t + phase)
    y = signal + 0.1 * rng.normal(size=n)
    return RawData("audio-synthetic", t=t, y=y)


def load_dataset(id_or_path) -> RawData:
    """Load a built-in dataset by id, or parse a CSV file by path."""
    key = str(id_or_path)
    if key == "motorcycle":
        return _parse_csv(_DATA_DIR / "motorcycle.csv")
    if key == "coal":
        raw = _parse_csv(_DATA_DIR / "coal.csv")
        return RawData("coal", t=raw.t)  # event times; y was a count marker
    if key == "banana":
        return _parse_csv(_DATA_DIR / "banana.csv")
    if key == "binary-synthetic":
        return _binary_synthetic()
    if key == "cox2d-synthetic":
        return _cox2d_synthetic()
    if key == "audio-synthetic":
        return _audio_synthetic()
    path = pathlib.Path(key)
    if not path.exists():
        raise FileNotFoundError(
            f"not a dataset id {DATASET_IDS} and no such file: {key}"
        )
    return _parse_csv(path)


def bin_events(events, bins) -> Tuple[np.ndarray, np.ndarray]:
    """Equal-width binning of 1-D or 2-D event coordinates.

    1-D: ``events`` (n,), ``bins`` an int -> (counts (bins,), centers (bins,)).
    2-D: ``events`` (n, 2), ``bins`` (b1, b2) -> (counts (b1, b2), centers:
    tuple of two center arrays).
    """
    events = np.asarray(events, dtype=float)
    if events.ndim == 1:
        nbins = int(bins)
        if nbins < 1:
            raise ValueError("need at least one bin")
        lo, hi = float(events.min()), float(events.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, nbins + 1)
        counts, _ = np.histogram(events, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        return counts.astype(float), centers
    if events.ndim == 2 and events.shape[1] == 2:
        b1, b2 = (int(b) for b in bins)
        if b1 < 1 or b2 < 1:
            raise ValueError("need at least one bin per dimension")
        lo = events.min(axis=0)
        hi = events.max(axis=0)
        hi = np.where(hi == lo, lo + 1.0, hi)
        edges1 = np.linspace(lo[0], hi[0], b1 + 1)
        edges2 = np.linspace(lo[1], hi[1], b2 + 1)
        counts, _, _ = np.histogram2d(events[:, 0], events[:, 1], bins=(edges1, edges2))
        centers = (
            0.5 * (edges1[:-1] + edges1[1:]),
            0.5 * (edges2[:-1] + edges2[1:]),
        )
        return counts.astype(float), centers
    raise ValueError("events must be a vector or an (n, 2) array")
