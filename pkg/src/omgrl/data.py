"""MDP data model: the aPTT reward, dose classes, trajectories, buffers and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DegenerateDataError, IngestionError, NumericError, ShapeError, StateError

FEATURES = (
    "age", "gender", "gcs", "dbp", "sbp", "rr", "hgb", "temperature", "wbc", "platelet",
    "pt", "acd", "creatinine", "bilirubin", "inr", "weight",
)
STATE_DIM = len(FEATURES)
N_ACTIONS = 6
CSV_COLUMNS = ("patient_id", "t") + FEATURES + ("aptt", "heparin_dose")
MIN_HORIZON = 7
STD_FLOOR = 1e-8


def rp_reward(aptt):
    """Clinical reward of an aPTT reading: near 1 inside 60-100 s, near -1 outside."""
    a = np.asarray(aptt, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("aPTT must be finite")
    r = 2.0 * expit(a - 60.0) - 2.0 * expit(a - 100.0) - 1.0
    return float(r) if r.ndim == 0 else r


def compute_bin_edges(doses) -> np.ndarray:
    """Five interior edges at the 1/6 ... 5/6 empirical quantiles (linear interpolation)."""
    d = np.asarray(doses, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise NumericError("doses must be finite")
    if np.unique(d).size < N_ACTIONS:
        raise DegenerateDataError(f"need at least {N_ACTIONS} distinct dose values")
    return np.quantile(d, np.arange(1, N_ACTIONS) / N_ACTIONS, method="linear")


def discretize_dose(dose, edges):
    """Class k iff edge[k-1] < dose <= edge[k]; a dose on an edge goes to the lower class."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.shape != (N_ACTIONS - 1,) or np.any(np.diff(edges) < 0):
        raise ShapeError("edges must be 5 nondecreasing values")
    d = np.asarray(dose, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NumericError("dose must be finite")
    k = np.searchsorted(edges, d, side="left")
    return int(k) if k.ndim == 0 else k.astype(np.int64)


@dataclass(frozen=True)
class PatientState:
    features: np.ndarray
    aptt: float

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.shape != (STATE_DIM,):
            raise ShapeError(f"state needs {STATE_DIM} features, got shape {f.shape}")
        if not np.all(np.isfinite(f)) or not math.isfinite(self.aptt):
            raise NumericError("patient state must be finite")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class Transition:
    state: PatientState
    action: int
    reward: float
    next_state: PatientState
    terminal: bool = False


@dataclass
class Trajectory:
    """One patient's hourly record.

    ``features``, ``aptt`` and ``dose`` hold one entry per recorded hour
    (``T + 1`` rows); ``actions`` and ``rewards`` one per transition (``T``).
    Transition ``t`` goes from row ``t`` to row ``t + 1``; its reward is the
    clinical reward of the aPTT at row ``t + 1``.
    """

    patient_id: str
    features: np.ndarray
    aptt: np.ndarray
    dose: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    t0: int = 0

    def __post_init__(self):
        n = len(self.features)
        if n < 2:
            raise ShapeError("a trajectory needs at least two rows")
        if self.features.shape != (n, STATE_DIM) or self.aptt.shape != (n,) or self.dose.shape != (n,):
            raise ShapeError("row arrays disagree in length")
        if self.actions.shape != (n - 1,) or self.rewards.shape != (n - 1,):
            raise ShapeError("transition arrays must have one entry fewer than rows")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def states(self) -> np.ndarray:
        return self.features[:-1]

    @property
    def next_states(self) -> np.ndarray:
        return self.features[1:]

    @property
    def terminals(self) -> np.ndarray:
        t = np.zeros(len(self), dtype=bool)
        t[-1] = True
        return t

    def transitions(self) -> list[Transition]:
        out = []
        for t in range(len(self)):
            out.append(Transition(
                PatientState(self.features[t], float(self.aptt[t])), int(self.actions[t]),
                float(self.rewards[t]), PatientState(self.features[t + 1], float(self.aptt[t + 1])),
                terminal=t == len(self) - 1))
        return out

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self))))


def make_trajectory(patient_id, features, aptt, dose, actions, t0=0) -> Trajectory:
    """Build a trajectory, filling rewards from the next-row aPTT."""
    features = np.asarray(features, dtype=np.float64)
    aptt = np.asarray(aptt, dtype=np.float64)
    return Trajectory(str(patient_id), features, aptt, np.asarray(dose, dtype=np.float64),
                      np.asarray(actions, dtype=np.int64), np.asarray(rp_reward(aptt[1:]), dtype=np.float64).reshape(-1),
                      int(t0))


def stack_transitions(trajectories) -> dict[str, np.ndarray]:
    """Flatten trajectories into transition arrays (states, actions, rewards, ...)."""
    if not trajectories:
        return {"states": np.zeros((0, STATE_DIM)), "actions": np.zeros(0, dtype=np.int64),
                "rewards": np.zeros(0), "next_states": np.zeros((0, STATE_DIM)),
                "terminals": np.zeros(0, dtype=bool), "aptt": np.zeros(0), "next_aptt": np.zeros(0)}
    return {
        "states": np.concatenate([tr.states for tr in trajectories]),
        "actions": np.concatenate([tr.actions for tr in trajectories]),
        "rewards": np.concatenate([tr.rewards for tr in trajectories]),
        "next_states": np.concatenate([tr.next_states for tr in trajectories]),
        "terminals": np.concatenate([tr.terminals for tr in trajectories]),
        "aptt": np.concatenate([tr.aptt[:-1] for tr in trajectories]),
        "next_aptt": np.concatenate([tr.aptt[1:] for tr in trajectories]),
    }


# --- replay buffer -------------------------------------------------------------------

class ReplayBuffer:
    """FIFO transition store backed by preallocated arrays.

    ``capacity=None`` gives an unbounded buffer (used for logged data).
    """

    _FIELDS = ("states", "actions", "rewards", "next_states", "terminals")

    def __init__(self, capacity: int | None = None, state_dim: int = STATE_DIM):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        alloc = capacity if capacity is not None else 1024
        self._data = {
            "states": np.zeros((alloc, state_dim)),
            "actions": np.zeros(alloc, dtype=np.int64),
            "rewards": np.zeros(alloc),
            "next_states": np.zeros((alloc, state_dim)),
            "terminals": np.zeros(alloc, dtype=bool),
        }
        self.size = 0
        self.cursor = 0
        self.total_pushed = 0

    def __len__(self) -> int:
        return self.size

    def _grow(self, needed: int):
        alloc = len(self._data["actions"])
        if needed <= alloc:
            return
        new = max(needed, 2 * alloc)
        for k, v in self._data.items():
            grown = np.zeros((new,) + v.shape[1:], dtype=v.dtype)
            grown[:alloc] = v
            self._data[k] = grown

    def push(self, transition: Transition):
        self.push_batch(transition.state.features[None], np.array([transition.action]),
                        np.array([transition.reward]), transition.next_state.features[None],
                        np.array([transition.terminal]))

    def push_batch(self, states, actions, rewards, next_states, terminals=None):
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        n = len(states)
        if terminals is None:
            terminals = np.zeros(n, dtype=bool)
        cols = {"states": states, "actions": np.asarray(actions, dtype=np.int64).reshape(n),
                "rewards": np.asarray(rewards, dtype=np.float64).reshape(n),
                "next_states": np.asarray(next_states, dtype=np.float64).reshape(n, self.state_dim),
                "terminals": np.asarray(terminals, dtype=bool).reshape(n)}
        if not np.all(np.isfinite(cols["rewards"])):
            raise NumericError("transition reward must be finite")
        if self.capacity is None:
            self._grow(self.size + n)
            for k in self._FIELDS:
                self._data[k][self.size:self.size + n] = cols[k]
            self.size += n
            self.cursor = self.size
        else:
            skip = max(0, n - self.capacity)
            idx = (self.cursor + np.arange(skip, n)) % self.capacity
            for k in self._FIELDS:
                self._data[k][idx] = cols[k][skip:]
            self.cursor = (self.cursor + n) % self.capacity
            self.size = min(self.size + n, self.capacity)
        self.total_pushed += n

    def _ordered_index(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.capacity is None or self.size < self.capacity:
            return np.arange(self.size)
        return (self.cursor + np.arange(self.size)) % self.capacity

    def arrays(self) -> dict[str, np.ndarray]:
        idx = self._ordered_index()
        return {k: self._data[k][idx].copy() for k in self._FIELDS}

    def get(self, idx) -> dict[str, np.ndarray]:
        idx = np.asarray(idx)
        return {k: self._data[k][idx] for k in self._FIELDS}

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise StateError("cannot sample from an empty buffer")
        if n > self.size:
            raise ValueError(f"requested {n} transitions from a buffer of {self.size}")
        idx = rng.choice(self.size, size=n, replace=False)
        return self.get(idx)

    def to_dict(self) -> dict:
        return {"capacity": -1 if self.capacity is None else self.capacity, "state_dim": self.state_dim,
                "cursor": self.cursor, "size": self.size, "total_pushed": self.total_pushed,
                "data": {k: v[: (self.size if self.capacity is None else len(v))].copy()
                         for k, v in self._data.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayBuffer":
        cap = None if d["capacity"] == -1 else int(d["capacity"])
        buf = cls(cap, int(d["state_dim"]))
        if cap is None:
            buf._grow(max(int(d["size"]), 1))
        for k in cls._FIELDS:
            arr = d["data"][k]
            buf._data[k][: len(arr)] = arr
        buf.size, buf.cursor, buf.total_pushed = int(d["size"]), int(d["cursor"]), int(d["total_pushed"])
        return buf


def buffer_from_trajectories(trajectories, capacity=None) -> ReplayBuffer:
    arr = stack_transitions(trajectories)
    buf = ReplayBuffer(capacity)
    if len(arr["actions"]):
        buf.push_batch(arr["states"], arr["actions"], arr["rewards"], arr["next_states"], arr["terminals"])
    return buf


# --- CSV ingestion ------------------------------------------------------------------

@dataclass
class IngestResult:
    trajectories: list[Trajectory]
    edges: np.ndarray
    n_excluded: int = 0


def _parse_float(text, row_no, col):
    try:
        v = float(text)
    except ValueError:
        raise IngestionError(f"row {row_no}: column {col!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise IngestionError(f"row {row_no}: column {col!r} is not finite")
    return v


def load_trajectories(path, edges=None, min_horizon: int = MIN_HORIZON) -> IngestResult:
    """Read the hourly trajectory CSV.

    Rows are grouped by patient and sorted by ``t``. Patients with fewer than
    ``min_horizon`` rows are dropped and counted. When ``edges`` is None the
    dose classes come from quantiles of all doses in the file.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file: missing header") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"missing column(s): {', '.join(missing)}")
        pos = {c: header.index(c) for c in CSV_COLUMNS}
        groups: dict[str, list] = {}
        seen: dict[str, set] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"row {row_no}: expected {len(header)} cells, found {len(row)}")
            pid = row[pos["patient_id"]]
            t_val = _parse_float(row[pos["t"]], row_no, "t")
            if t_val != int(t_val):
                raise IngestionError(f"row {row_no}: timestep must be an integer")
            t = int(t_val)
            if t in seen.setdefault(pid, set()):
                raise IngestionError(f"row {row_no}: duplicate timestep {t} for patient {pid}")
            seen[pid].add(t)
            feats = [_parse_float(row[pos[c]], row_no, c) for c in FEATURES]
            aptt = _parse_float(row[pos["aptt"]], row_no, "aptt")
            dose = _parse_float(row[pos["heparin_dose"]], row_no, "heparin_dose")
            groups.setdefault(pid, []).append((t, feats, aptt, dose))

    if edges is None:
        all_doses = [r[3] for rows in groups.values() for r in rows]
        edges = compute_bin_edges(all_doses) if all_doses else np.full(N_ACTIONS - 1, np.nan)
    edges = np.asarray(edges, dtype=np.float64)

    out, excluded = [], 0
    for pid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        ts = [r[0] for r in rows]
        if len(rows) < max(min_horizon, 2):
            excluded += 1
            continue
        if any(b - a != 1 for a, b in zip(ts, ts[1:])):
            raise IngestionError(f"patient {pid}: timesteps are not consecutive hours")
        feats = np.array([r[1] for r in rows])
        aptt = np.array([r[2] for r in rows])
        dose = np.array([r[3] for r in rows])
        actions = discretize_dose(dose[:-1], edges)
        out.append(make_trajectory(pid, feats, aptt, dose, actions, t0=ts[0]))
    return IngestResult(out, edges, excluded)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectories(path, trajectories):
    """Write trajectories in the ingestion schema (floats written with full precision)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for tr in trajectories:
            for i in range(len(tr.features)):
                w.writerow([tr.patient_id, tr.t0 + i] + [_fmt(v) for v in tr.features[i]]
                           + [_fmt(tr.aptt[i]), _fmt(tr.dose[i])])


def save_keyvalue(path, values: dict):
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = ",".join(_fmt(x) for x in np.ravel(v))
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_keyvalue(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def save_edges(path, edges):
    save_keyvalue(path, {"edges": np.asarray(edges)})


def load_edges(path) -> np.ndarray:
    return np.array([float(x) for x in load_keyvalue(path)["edges"].split(",")])


# --- normalisation and splitting ----------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(self.mean.tobytes() + self.std.tobytes()).hexdigest()[:16]

    def save(self, path):
        save_keyvalue(path, {"mean": self.mean, "std": self.std})

    @classmethod
    def load(cls, path) -> "Normalizer":
        kv = load_keyvalue(path)
        parse = lambda s: np.array([float(x) for x in s.split(",")])  # noqa: E731
        return cls(parse(kv["mean"]), parse(kv["std"]))

    @classmethod
    def identity(cls, dim: int = STATE_DIM) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


def fit_normalizer(trajectories) -> Normalizer:
    """Per-feature z-score statistics over every recorded state (population std)."""
    rows = np.concatenate([tr.features for tr in trajectories]) if trajectories else np.zeros((0, STATE_DIM))
    if len(rows) < 2:
        raise DegenerateDataError("need at least two states to fit a normalizer")
    return Normalizer(rows.mean(axis=0), np.maximum(rows.std(axis=0), STD_FLOOR))


def apply_normalizer(trajectories, normalizer: Normalizer) -> list[Trajectory]:
    """Normalise state features only; aPTT, doses and rewards keep raw units."""
    return [replace(tr, features=normalizer.apply(tr.features)) for tr in trajectories]


def split_train_test(trajectories, ratio: float = 0.8, seed: int = 0):
    """Patient-level split; the train share is floor(ratio * n_patients)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    ids = sorted({tr.patient_id for tr in trajectories})
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = math.floor(ratio * len(ids) + 1e-9)
    train_ids = {ids[i] for i in perm[:n_train]}
    train = [tr for tr in trajectories if tr.patient_id in train_ids]
    test = [tr for tr in trajectories if tr.patient_id not in train_ids]
    return train, test
