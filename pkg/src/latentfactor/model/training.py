"""Training loop: one trading day per step, IWAE bound, AdamW, Polyak averaging."""

from __future__ import annotations

import json
import time
from typing import Callable

import numpy as np

from .._random import substream
from ..data import FeaturePanel, ReturnsPanel, SplitSpec, trainable_dates, windows
from ..numerics import DecompositionError, Tape, Tensor
from .checkpoint import Checkpoint
from .config import ModelConfig
from .inference import ciwae_loss
from .network import PRIOR_PARAMS, embed, init_weights, prior_tensors
from .optim import AdamW, PolyakAverage


class TrainingDiverged(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


def day_loss(weights: dict, config: ModelConfig, panel: ReturnsPanel, features: FeaturePanel | None,
             t: int, rng: np.random.Generator, k: int, dropout_rng: np.random.Generator | None = None):
    """Per-stock IWAE loss for the forecast made at date index ``t``."""
    win = windows(panel, features, t, config.lookback, require_next=True)
    emb = embed(weights, config, win.sequences, win.static, rng=dropout_rng)
    ps, pn = prior_tensors(weights)
    eps = rng.standard_normal((k, config.factors))
    return ciwae_loss(emb, ps, pn, win.targets, eps, config.variance_mode, config.diagonal_only)


def evaluate_loss(weights: dict[str, np.ndarray], config: ModelConfig, panel: ReturnsPanel,
                  features: FeaturePanel | None, dates, k: int | None = None) -> float:
    """Mean per-stock IWAE loss over ``dates`` with evaluation-seeded draws and no dropout."""
    k = config.val_k if k is None else k
    vals = []
    for t in dates:
        rng = substream(config.seed, "eval", int(t))
        vals.append(day_loss(weights, config, panel, features, int(t), rng, k).item())
    return float(np.mean(vals)) if vals else float("nan")


def _subsample(dates: np.ndarray, cap: int | None) -> np.ndarray:
    if cap is None or len(dates) <= cap:
        return dates
    pick = np.unique(np.linspace(0, len(dates) - 1, cap).round().astype(int))
    return dates[pick]


def train(
    config: ModelConfig,
    panel: ReturnsPanel,
    features: FeaturePanel | None,
    split: SplitSpec,
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Fit the network and prior; returns the checkpoint with the selected weights.

    ``log`` receives one record per validation evaluation with keys
    ``step``, ``train_loss``, ``val_loss`` and ``wallclock_s``.
    """
    if features is None:
        features = FeaturePanel.empty(panel.n_dates, panel.n_tickers)
    idx = split.indices(panel.dates)
    train_dates = trainable_dates(panel, idx["train"], config.lookback)
    if train_dates.size == 0:
        raise ValueError("no training dates remain after the lookback warm-up")
    val_dates = _subsample(trainable_dates(panel, idx["val"], config.lookback), config.val_dates)

    weights = init_weights(config, features.n_ts, features.n_static, substream(config.seed, "init"))
    init_copy = {k: v.copy() for k, v in weights.items()}
    opt = AdamW(weights, lr=config.lr, weight_decay=config.weight_decay, no_decay=PRIOR_PARAMS)
    polyak = PolyakAverage()
    rng = substream(config.seed, "train")
    drop_rng = substream(config.seed, "train", 1) if config.dropout > 0 else None

    best_val = np.inf
    best: dict[str, np.ndarray] | None = None
    best_step = None
    history = []
    running = []
    start = time.perf_counter()
    names = list(weights)
    for step in range(1, config.steps + 1):
        t = int(train_dates[rng.integers(train_dates.size)])
        params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
        try:
            with Tape() as tape:
                loss = day_loss(params, config, panel, features, t, rng, config.k_iwae, drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, f"loss {value}")
            grads = tape.backward(loss, [params[k] for k in names])
        except DecompositionError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(step, "non-finite gradient")
        opt.step(weights, dict(zip(names, grads)))
        running.append(value)
        if step > config.polyak_from:
            polyak.update(weights)
        if step % config.val_every == 0 and val_dates.size:
            cand = polyak.snapshot() or {k: v.copy() for k, v in weights.items()}
            val = evaluate_loss(cand, config, panel, features, val_dates)
            if not np.isfinite(val):
                raise TrainingDiverged(step, f"validation loss {val}")
            rec = {"step": step, "train_loss": float(np.mean(running)), "val_loss": val,
                   "wallclock_s": round(time.perf_counter() - start, 3)}
            running = []
            history.append(rec)
            if log is not None:
                log(rec)
            if val < best_val:
                best_val, best, best_step = val, cand, step

    if best is not None:
        deployed, source = best, "best_validation"
    elif polyak.mean is not None:
        deployed, source = polyak.snapshot(), "final_polyak"
    elif config.steps == 0:
        deployed, source = init_copy, "initialization"
    else:
        deployed, source = {k: v.copy() for k, v in weights.items()}, "final_iterate"
    meta = {
        "ts_channels": list(features.ts_names),
        "static_channels": list(features.static_names),
        "selected": source,
        "best_step": best_step,
        "best_val_loss": None if best is None else best_val,
        "n_train_dates": int(train_dates.size),
        "n_val_dates": int(val_dates.size),
    }
    return Checkpoint(config, deployed, panel.norm_constant, raw_weights=weights, meta=meta)


def jsonl_logger(path) -> Callable[[dict], None]:
    fh = open(path, "w")

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    write.close = fh.close  # type: ignore[attr-defined]
    return write
