"""Point-in-time equity panels: returns, membership, features, splits, windows.

CSV layouts
-----------
returns.csv   ``date,ticker,return`` -- one row per member (date, ticker)
features.csv  ``date,ticker,<channel>...`` -- time-varying channels
static.csv    ``ticker,<channel>...`` -- per-stock constant channels
schema.json   ``{"ts_channels": [...], "static_channels": [...], "presence_flag": "present"}``
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAPER_NORM_CONSTANT = 0.02672357
DEFAULT_PRESENCE_FLAG = "present"


class IngestionError(ValueError):
    """Malformed or inconsistent input files."""


class WindowError(ValueError):
    """A lookback window cannot be formed for the requested date."""


@dataclass(frozen=True)
class ReturnsPanel:
    """Normalized daily simple returns on a changing universe.

    ``returns`` holds raw returns divided by ``norm_constant`` and is NaN
    wherever ``membership`` is false.
    """

    dates: np.ndarray
    tickers: np.ndarray
    membership: np.ndarray
    returns: np.ndarray
    norm_constant: float = 1.0

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        tickers = np.asarray(self.tickers, dtype=str)
        membership = np.asarray(self.membership, dtype=bool)
        returns = np.array(self.returns, dtype=np.float64)
        if membership.shape != (dates.shape[0], tickers.shape[0]) or returns.shape != membership.shape:
            raise IngestionError(
                f"panel shapes disagree: dates {dates.shape}, tickers {tickers.shape}, "
                f"membership {membership.shape}, returns {returns.shape}")
        if dates.size > 1 and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise IngestionError("dates must be strictly increasing")
        if np.unique(tickers).size != tickers.size:
            raise IngestionError("tickers must be unique")
        if not self.norm_constant > 0:
            raise IngestionError("norm_constant must be positive")
        if np.any(~np.isfinite(returns[membership])):
            raise IngestionError("non-finite return for a member (date, ticker)")
        returns[~membership] = np.nan
        returns.setflags(write=False)
        membership.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "tickers", tickers)
        object.__setattr__(self, "membership", membership)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "norm_constant", float(self.norm_constant))

    @property
    def n_dates(self) -> int:
        return self.dates.shape[0]

    @property
    def n_tickers(self) -> int:
        return self.tickers.shape[0]

    def universe_size(self) -> np.ndarray:
        return self.membership.sum(axis=1)

    def raw_returns(self) -> np.ndarray:
        return self.returns * self.norm_constant

    def date_index(self, date) -> int:
        d = np.datetime64(date, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= self.n_dates or self.dates[i] != d:
            raise KeyError(f"date {d} not in panel")
        return i

    def renormalized(self, norm_constant: float) -> ReturnsPanel:
        raw = self.returns * self.norm_constant
        return ReturnsPanel(self.dates, self.tickers, self.membership, raw / norm_constant, norm_constant)


@dataclass(frozen=True)
class FeaturePanel:
    ts_features: np.ndarray
    static_features: np.ndarray
    ts_names: tuple[str, ...] = ()
    static_names: tuple[str, ...] = ()
    presence_flag: str = DEFAULT_PRESENCE_FLAG

    def __post_init__(self):
        ts = np.asarray(self.ts_features, dtype=np.float64)
        st = np.asarray(self.static_features, dtype=np.float64)
        if ts.ndim != 3 or st.ndim != 2 or ts.shape[1] != st.shape[0]:
            raise IngestionError(f"feature shapes disagree: ts {ts.shape}, static {st.shape}")
        ts_names = tuple(self.ts_names) or tuple(f"ts{i}" for i in range(ts.shape[2]))
        static_names = tuple(self.static_names) or tuple(f"st{i}" for i in range(st.shape[1]))
        if len(ts_names) != ts.shape[2] or len(static_names) != st.shape[1]:
            raise IngestionError("channel names do not match feature widths")
        object.__setattr__(self, "ts_features", ts)
        object.__setattr__(self, "static_features", st)
        object.__setattr__(self, "ts_names", ts_names)
        object.__setattr__(self, "static_names", static_names)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.ts_names + self.static_names

    @property
    def n_ts(self) -> int:
        return self.ts_features.shape[2]

    @property
    def n_static(self) -> int:
        return self.static_features.shape[1]

    @classmethod
    def empty(cls, n_dates: int, n_tickers: int) -> FeaturePanel:
        return cls(np.zeros((n_dates, n_tickers, 0)), np.zeros((n_tickers, 0)))


@dataclass(frozen=True)
class SplitSpec:
    """Chronological three-way split: train ``<= train_end < val <= val_end < test``."""

    train_end: np.datetime64
    val_end: np.datetime64

    def __post_init__(self):
        te = np.datetime64(self.train_end, "D")
        ve = np.datetime64(self.val_end, "D")
        if not te < ve:
            raise ValueError("train_end must precede val_end")
        object.__setattr__(self, "train_end", te)
        object.__setattr__(self, "val_end", ve)

    def validate(self, dates: np.ndarray) -> None:
        if not self.val_end < dates[-1]:
            raise ValueError(f"val_end {self.val_end} must precede the last date {dates[-1]}")
        if not dates[0] <= self.train_end:
            raise ValueError(f"train_end {self.train_end} precedes the first date {dates[0]}")

    def indices(self, dates: np.ndarray) -> dict[str, np.ndarray]:
        self.validate(dates)
        dates = np.asarray(dates, dtype="datetime64[D]")
        idx = np.arange(dates.shape[0])
        return {
            "train": idx[dates <= self.train_end],
            "val": idx[(dates > self.train_end) & (dates <= self.val_end)],
            "test": idx[dates > self.val_end],
        }

    @classmethod
    def from_fractions(cls, dates: np.ndarray, train: float = 0.6, val: float = 0.2) -> SplitSpec:
        n = len(dates)
        return cls(dates[int(n * train) - 1], dates[int(n * (train + val)) - 1])


# ---------------------------------------------------------------------------
# normalization


def compute_norm_constant(raw_returns: np.ndarray, membership: np.ndarray, end: int | None = None) -> float:
    """Population standard deviation of member returns over rows ``[0, end]``."""
    rows = slice(None) if end is None else slice(0, end + 1)
    vals = np.asarray(raw_returns, dtype=np.float64)[rows][np.asarray(membership, bool)[rows]]
    if vals.size < 2:
        raise ValueError("need at least two member observations to normalize returns")
    sd = float(np.std(vals))
    if not sd > 0:
        raise ValueError("degenerate training returns: zero standard deviation")
    return sd


# ---------------------------------------------------------------------------
# ingestion


def _parse_float(text: str, path: Path, line: int) -> float:
    try:
        val = float(text)
    except ValueError:
        raise IngestionError(f"{path}:{line}: non-numeric field {text!r}") from None
    return val


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return [h.strip() for h in header], rows


def load_schema(path) -> dict:
    with open(path) as fh:
        schema = json.load(fh)
    unknown = set(schema) - {"ts_channels", "static_channels", "presence_flag"}
    if unknown:
        raise IngestionError(f"unknown schema keys: {sorted(unknown)}")
    return schema


def load_panel(
    returns_path,
    features_path=None,
    static_path=None,
    schema: dict | str | Path | None = None,
    norm_constant: float | None = None,
    train_end=None,
) -> tuple[ReturnsPanel, FeaturePanel]:
    """Read the CSV files into aligned panels.

    Membership is the set of (date, ticker) rows present in the returns file.
    Raw returns are divided by ``norm_constant``; when it is not pinned it is
    computed from member returns dated on or before ``train_end`` (the whole
    file when ``train_end`` is None).
    """
    returns_path = Path(returns_path)
    if isinstance(schema, (str, Path)):
        schema = load_schema(schema)
    schema = schema or {}
    header, rows = _read_rows(returns_path)
    if header[:3] != ["date", "ticker", "return"]:
        raise IngestionError(f"{returns_path}: header must be date,ticker,return")
    records: dict[tuple[str, str], float] = {}
    for line, row in rows:
        if len(row) < 3:
            raise IngestionError(f"{returns_path}:{line}: expected 3 fields")
        key = (row[0].strip(), row[1].strip())
        if key in records:
            raise IngestionError(f"{returns_path}:{line}: duplicate (date, ticker) {key}")
        try:
            np.datetime64(key[0], "D")
        except ValueError:
            raise IngestionError(f"{returns_path}:{line}: bad date {key[0]!r}") from None
        records[key] = _parse_float(row[2], returns_path, line)
    dates = np.array(sorted({np.datetime64(d, "D") for d, _ in records}), dtype="datetime64[D]")
    tickers = np.array(sorted({t for _, t in records}), dtype=str)
    d_pos = {str(d): i for i, d in enumerate(dates)}
    t_pos = {t: j for j, t in enumerate(tickers)}
    raw = np.full((dates.size, tickers.size), np.nan)
    member = np.zeros(raw.shape, dtype=bool)
    for (d, t), val in records.items():
        i, j = d_pos[str(np.datetime64(d, "D"))], t_pos[t]
        raw[i, j] = val
        member[i, j] = True
    if norm_constant is None:
        end = None
        if train_end is not None:
            end = int(np.searchsorted(dates, np.datetime64(train_end, "D"), side="right")) - 1
        norm_constant = compute_norm_constant(raw, member, end)
    panel = ReturnsPanel(dates, tickers, member, raw / norm_constant, norm_constant)

    ts_names = list(schema.get("ts_channels", []))
    static_names = list(schema.get("static_channels", []))
    ts = np.zeros((dates.size, tickers.size, 0))
    if features_path is not None:
        fpath = Path(features_path)
        fheader, frows = _read_rows(fpath)
        if fheader[:2] != ["date", "ticker"]:
            raise IngestionError(f"{fpath}: header must start with date,ticker")
        names = fheader[2:]
        if ts_names and names != ts_names:
            raise IngestionError(f"{fpath}: channels {names} disagree with schema {ts_names}")
        ts_names = names
        ts = np.full((dates.size, tickers.size, len(names)), np.nan)
        seen = set()
        for line, row in frows:
            if len(row) != len(fheader):
                raise IngestionError(f"{fpath}:{line}: expected {len(fheader)} fields")
            key = (str(np.datetime64(row[0].strip(), "D")), row[1].strip())
            if key in seen:
                raise IngestionError(f"{fpath}:{line}: duplicate (date, ticker) {key}")
            seen.add(key)
            if key[0] not in d_pos or key[1] not in t_pos:
                continue
            ts[d_pos[key[0]], t_pos[key[1]]] = [_parse_float(v, fpath, line) for v in row[2:]]
    static = np.zeros((tickers.size, 0))
    if static_path is not None:
        spath = Path(static_path)
        sheader, srows = _read_rows(spath)
        if sheader[:1] != ["ticker"]:
            raise IngestionError(f"{spath}: header must start with ticker")
        names = sheader[1:]
        if static_names and names != static_names:
            raise IngestionError(f"{spath}: channels {names} disagree with schema {static_names}")
        static_names = names
        static = np.zeros((tickers.size, len(names)))
        for line, row in srows:
            if len(row) != len(sheader):
                raise IngestionError(f"{spath}:{line}: expected {len(sheader)} fields")
            t = row[0].strip()
            if t in t_pos:
                static[t_pos[t]] = [_parse_float(v, spath, line) for v in row[1:]]
    features = FeaturePanel(
        ts, static, tuple(ts_names), tuple(static_names),
        schema.get("presence_flag", DEFAULT_PRESENCE_FLAG),
    )
    return panel, features


def _fmt(x: float) -> str:
    return repr(float(x))


def write_panel(panel: ReturnsPanel, features: FeaturePanel | None, out_dir) -> dict[str, Path]:
    """Write the CSV/JSON layout read by :func:`load_panel`; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"returns": out / "returns.csv"}
    raw = panel.raw_returns()
    with open(paths["returns"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "return"])
        for i, d in enumerate(panel.dates):
            for j in np.flatnonzero(panel.membership[i]):
                w.writerow([str(d), panel.tickers[j], _fmt(raw[i, j])])
    if features is not None:
        paths["features"] = out / "features.csv"
        paths["static"] = out / "static.csv"
        paths["schema"] = out / "schema.json"
        with open(paths["features"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "ticker", *features.ts_names])
            for i, d in enumerate(panel.dates):
                for j in np.flatnonzero(panel.membership[i]):
                    w.writerow([str(d), panel.tickers[j], *map(_fmt, features.ts_features[i, j])])
        with open(paths["static"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ticker", *features.static_names])
            for j, t in enumerate(panel.tickers):
                w.writerow([t, *map(_fmt, features.static_features[j])])
        with open(paths["schema"], "w") as fh:
            json.dump({"ts_channels": list(features.ts_names),
                       "static_channels": list(features.static_names),
                       "presence_flag": features.presence_flag}, fh, indent=2)
    return paths


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class DayWindows:
    """Model inputs for the stocks of one date ``t``.

    ``sequences`` has shape ``(N_t, lookback + 1, 1 + D_ts + 1)`` with channels
    ``[return, ts features..., presence]`` for days ``t - lookback .. t``.
    ``targets`` are the day ``t + 1`` returns (NaN when unavailable).
    """

    t: int
    stock_index: np.ndarray
    tickers: np.ndarray
    sequences: np.ndarray
    static: np.ndarray
    targets: np.ndarray = field(repr=False)

    @property
    def n_stocks(self) -> int:
        return self.stock_index.shape[0]

    @property
    def has_targets(self) -> bool:
        return bool(self.targets.size) and bool(np.all(np.isfinite(self.targets)))

    def subset(self, rows) -> DayWindows:
        rows = np.asarray(rows)
        return DayWindows(self.t, self.stock_index[rows], self.tickers[rows],
                          self.sequences[rows], self.static[rows], self.targets[rows])


def windows(
    panel: ReturnsPanel,
    features: FeaturePanel | None,
    t: int,
    lookback: int,
    require_next: bool = False,
    stocks: np.ndarray | None = None,
) -> DayWindows:
    """Per-stock input sequences ending at date index ``t``.

    Stocks must be members on ``t`` (and on ``t + 1`` when ``require_next``).
    Gaps earlier in the window are zero-filled with the presence channel at 0;
    non-member returns are never read.
    """
    if lookback < 0:
        raise WindowError("lookback must be non-negative")
    if t - lookback < 0:
        raise WindowError(f"date index {t} has fewer than {lookback} prior dates")
    if t >= panel.n_dates:
        raise WindowError(f"date index {t} beyond the panel ({panel.n_dates} dates)")
    if features is None:
        features = FeaturePanel.empty(panel.n_dates, panel.n_tickers)
    has_next = t + 1 < panel.n_dates
    mask = panel.membership[t].copy()
    if require_next:
        if not has_next:
            raise WindowError(f"date index {t} has no successor for a target")
        mask &= panel.membership[t + 1]
    idx = np.flatnonzero(mask) if stocks is None else np.asarray(stocks)
    if stocks is not None and not np.all(mask[idx]):
        raise WindowError("requested stocks are not members on the window date")
    rows = slice(t - lookback, t + 1)
    present = panel.membership[rows][:, idx].T  # (N, L)
    ret = np.where(present, np.nan_to_num(panel.returns[rows][:, idx].T), 0.0)
    ts = np.transpose(features.ts_features[rows][:, idx], (1, 0, 2))  # (N, L, D)
    ts = np.where(present[..., None] & np.isfinite(ts), ts, 0.0)
    seq = np.concatenate([ret[..., None], ts, present[..., None].astype(np.float64)], axis=2)
    static = np.nan_to_num(features.static_features[idx])
    if has_next:
        nxt_member = panel.membership[t + 1, idx]
        targets = np.where(nxt_member, panel.returns[t + 1, idx], np.nan)
    else:
        targets = np.full(idx.shape, np.nan)
    return DayWindows(t, idx, panel.tickers[idx], seq, static, targets)


def trainable_dates(panel: ReturnsPanel, index: np.ndarray, lookback: int) -> np.ndarray:
    """Dates in ``index`` with a full lookback and an in-split successor date.

    Dates whose next-day universe intersection is empty are dropped.
    """
    index = np.asarray(index)
    if index.size == 0:
        return index
    in_split = np.zeros(panel.n_dates, dtype=bool)
    in_split[index] = True
    keep = []
    for t in index:
        if t - lookback < 0 or t + 1 >= panel.n_dates or not in_split[t + 1]:
            continue
        if np.any(panel.membership[t] & panel.membership[t + 1]):
            keep.append(t)
    return np.asarray(keep, dtype=int)


def forecast_dates(panel: ReturnsPanel, index: np.ndarray, lookback: int) -> np.ndarray:
    """Dates whose day-``t + 1`` returns fall inside ``index`` (targets in split)."""
    index = np.asarray(index)
    in_split = np.zeros(panel.n_dates, dtype=bool)
    in_split[index] = True
    out = [t for t in range(lookback, panel.n_dates - 1)
           if in_split[t + 1] and np.any(panel.membership[t] & panel.membership[t + 1])]
    return np.asarray(out, dtype=int)


def date_span(panel: ReturnsPanel, index: np.ndarray) -> str:
    if len(index) == 0:
        return "empty"
    return f"{panel.dates[index[0]]} .. {panel.dates[index[-1]]}"


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
