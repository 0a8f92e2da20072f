"""Trajectory storage, the binary dataset file, hindsight relabeling and batch mixing."""

from __future__ import annotations

import enum
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flap.errors import DatasetFormatError

FORMAT_VERSION = 1
_MAGIC = "FLAPDS"
_RECORD_HEADER = struct.Struct("<IiII")  # length, scene_id, flags, has_goal
_CRC = struct.Struct("<I")

INCOMPLETE = 1
TRUNCATED_PAIR = 2  # set on affordance pairs that ran past the episode end


@dataclass
class Trajectory:
    observations: np.ndarray  # (L+1, obs_dim) float32
    actions: np.ndarray  # (L, action_dim) float32
    scene_id: int = 0
    flags: int = 0
    goal_obs: np.ndarray | None = None  # commanded goal, online trajectories only

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        if self.goal_obs is not None:
            self.goal_obs = np.ascontiguousarray(self.goal_obs, dtype=np.float32)
        if self.actions.ndim != 2 or self.observations.ndim != 2:
            raise ValueError("observations and actions must be 2-D arrays")
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                f"need len(observations) == len(actions) + 1, got "
                f"{len(self.observations)} and {len(self.actions)}"
            )

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def incomplete(self) -> bool:
        return bool(self.flags & INCOMPLETE)


# -- file format ---------------------------------------------------------------


def _encode_record(traj: Trajectory) -> bytes:
    has_goal = traj.goal_obs is not None
    header = _RECORD_HEADER.pack(len(traj), int(traj.scene_id), int(traj.flags), int(has_goal))
    parts = [header, traj.observations.astype("<f4").tobytes(), traj.actions.astype("<f4").tobytes()]
    if has_goal:
        parts.append(traj.goal_obs.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def save_dataset(trajs: list[Trajectory], path, obs_dim: int | None = None, action_dim: int | None = None) -> None:
    """Write trajectories to ``path``.

    The file starts with one text manifest line, followed by one binary record
    per trajectory: a fixed header, little-endian float32 payload and a CRC32
    of header plus payload.
    """
    if trajs:
        obs_dim = trajs[0].observations.shape[1]
        action_dim = trajs[0].actions.shape[1]
    obs_dim = obs_dim or 0
    action_dim = action_dim or 0
    buf = io.BytesIO()
    manifest = (
        f"{_MAGIC} version={FORMAT_VERSION} obs_dim={obs_dim} "
        f"action_dim={action_dim} n_records={len(trajs)}\n"
    )
    buf.write(manifest.encode("ascii"))
    for traj in trajs:
        if traj.observations.shape[1] != obs_dim or traj.actions.shape[1] != action_dim:
            raise ValueError("all trajectories must share observation and action dimensions")
        buf.write(_encode_record(traj))
    Path(path).write_bytes(buf.getvalue())


def _parse_manifest(line: bytes) -> dict[str, int]:
    try:
        fields = line.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise DatasetFormatError("manifest line is not ASCII") from exc
    if not fields or fields[0] != _MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    out = {}
    for item in fields[1:]:
        key, _, value = item.partition("=")
        out[key] = int(value)
    for key in ("version", "obs_dim", "action_dim", "n_records"):
        if key not in out:
            raise DatasetFormatError(f"manifest missing '{key}'")
    if out["version"] != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {out['version']} (expected {FORMAT_VERSION})"
        )
    return out


def load_dataset(path) -> list[Trajectory]:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise DatasetFormatError("missing manifest line")
    meta = _parse_manifest(data[:newline])
    obs_dim, action_dim = meta["obs_dim"], meta["action_dim"]
    pos = newline + 1
    trajs = []
    for index in range(meta["n_records"]):
        if pos + _RECORD_HEADER.size > len(data):
            raise DatasetFormatError(f"record {index}: truncated header")
        length, scene_id, flags, has_goal = _RECORD_HEADER.unpack_from(data, pos)
        n_floats = (length + 1) * obs_dim + length * action_dim + (obs_dim if has_goal else 0)
        end = pos + _RECORD_HEADER.size + 4 * n_floats
        if end + _CRC.size > len(data):
            raise DatasetFormatError(f"record {index}: truncated payload")
        body = data[pos:end]
        (crc,) = _CRC.unpack_from(data, end)
        if zlib.crc32(body) != crc:
            raise DatasetFormatError(f"record {index}: checksum mismatch")
        floats = np.frombuffer(body, dtype="<f4", offset=_RECORD_HEADER.size).astype(np.float32)
        n_obs = (length + 1) * obs_dim
        n_act = length * action_dim
        trajs.append(
            Trajectory(
                observations=floats[:n_obs].reshape(length + 1, obs_dim),
                actions=floats[n_obs:n_obs + n_act].reshape(length, action_dim),
                scene_id=scene_id,
                flags=flags,
                goal_obs=floats[n_obs + n_act:].copy() if has_goal else None,
            )
        )
        pos = end + _CRC.size
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after record {meta['n_records'] - 1}")
    return trajs


# -- replay buffers and relabeling --------------------------------------------


class Provenance(enum.IntEnum):
    OFFLINE = 0
    ONLINE = 1


@dataclass(frozen=True)
class RelabelConfig:
    ground_truth_fraction: float = 0.0
    geometric_future_bias: bool = False
    geometric_p: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ground_truth_fraction <= 1.0:
            raise ValueError(f"ground_truth_fraction must be in [0, 1], got {self.ground_truth_fraction}")


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    goal_obs: np.ndarray
    reward: float
    done: bool
    traj_index: int
    t: int
    goal_index: int  # -1 when the goal is a commanded goal that is not in the trajectory


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    goal_obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    provenance: np.ndarray
    online_empty_warning: bool = False
    t: np.ndarray | None = field(default=None, repr=False)
    goal_index: np.ndarray | None = field(default=None, repr=False)
    traj_index: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.obs)


class TrajectoryBuffer:
    """Flat storage of whole trajectories with vectorised relabeled sampling.

    A single writer appends trajectories; sampling only reads, with the caller
    supplying its own generator.
    """

    def __init__(self, trajs: list[Trajectory] | None = None):
        self.trajectories: list[Trajectory] = []
        self._dirty = True
        for traj in trajs or []:
            self.add(traj)

    def add(self, traj: Trajectory) -> None:
        if len(traj) < 1:
            return
        self.trajectories.append(traj)
        self._dirty = True

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return int(sum(len(t) for t in self.trajectories))

    def _build(self) -> None:
        if not self._dirty:
            return
        lengths = np.array([len(t) for t in self.trajectories], dtype=np.int64)
        self._lengths = lengths
        self._obs_offsets = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]]).astype(np.int64)
        self._act_offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        self._obs = np.concatenate([t.observations for t in self.trajectories])
        self._act = np.concatenate([t.actions for t in self.trajectories])
        obs_dim = self._obs.shape[1]
        self._has_goal = np.array([t.goal_obs is not None for t in self.trajectories])
        self._goals = np.stack(
            [t.goal_obs if t.goal_obs is not None else np.zeros(obs_dim, np.float32) for t in self.trajectories]
        )
        self._dirty = False

    @property
    def observations(self) -> np.ndarray:
        """All stored observations stacked, shape (sum(L+1), obs_dim)."""
        self._build()
        return self._obs

    def sample_indices(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        self._build()
        i = rng.integers(0, len(self.trajectories), n)
        t = (rng.random(n) * self._lengths[i]).astype(np.int64)
        return i, t

    def sample(self, n: int, cfg: RelabelConfig, rng: np.random.Generator) -> Batch:
        """Draw ``n`` relabeled transitions (uniform trajectory, uniform time step)."""
        if not self.trajectories:
            raise ValueError("cannot sample from an empty buffer")
        i, t = self.sample_indices(n, rng)
        lengths = self._lengths[i]
        if cfg.geometric_future_bias:
            k = np.minimum(t + rng.geometric(cfg.geometric_p, n), lengths)
        else:
            # uniform over t+1 .. L
            k = t + 1 + (rng.random(n) * (lengths - t)).astype(np.int64)
        use_gt = rng.random(n) < cfg.ground_truth_fraction
        k = np.where(use_gt, lengths, k)
        base = self._obs_offsets[i]
        goal = self._obs[base + k]
        commanded = use_gt & self._has_goal[i]
        goal[commanded] = self._goals[i[commanded]]
        goal_index = np.where(commanded, -1, k)
        done = goal_index == t + 1
        return Batch(
            obs=self._obs[base + t],
            action=self._act[self._act_offsets[i] + t],
            next_obs=self._obs[base + t + 1],
            goal_obs=goal,
            reward=np.where(done, 0.0, -1.0).astype(np.float32),
            done=done.astype(np.float32),
            provenance=np.zeros(n, dtype=np.int8),
            t=t,
            goal_index=goal_index,
            traj_index=i,
        )

    def affordance_pairs(self, n: int, delta_t: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Observation pairs ``delta_t`` apart; pairs running past the end use the final index.

        Returns (obs_t, obs_t_plus, truncated_flag).
        """
        self._build()
        i = rng.integers(0, len(self.trajectories), n)
        t = (rng.random(n) * self._lengths[i]).astype(np.int64)
        tp = t + delta_t
        truncated = tp > self._lengths[i]
        tp = np.minimum(tp, self._lengths[i])
        base = self._obs_offsets[i]
        return self._obs[base + t], self._obs[base + tp], truncated

    def successor_pairs(self, n: int, gap: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Pairs exactly ``gap`` apart, drawn only from trajectories long enough to contain them."""
        self._build()
        ok = np.flatnonzero(self._lengths >= gap)
        if ok.size == 0:
            return np.zeros((0, self._obs.shape[1]), np.float32), np.zeros((0, self._obs.shape[1]), np.float32)
        i = ok[rng.integers(0, ok.size, n)]
        t = (rng.random(n) * (self._lengths[i] - gap + 1)).astype(np.int64)
        base = self._obs_offsets[i]
        return self._obs[base + t], self._obs[base + t + gap]


def relabel_sample(buffer: TrajectoryBuffer, cfg: RelabelConfig, rng: np.random.Generator) -> Transition:
    """Single relabeled transition; see :meth:`TrajectoryBuffer.sample`."""
    b = buffer.sample(1, cfg, rng)
    return Transition(
        obs=b.obs[0], action=b.action[0], next_obs=b.next_obs[0], goal_obs=b.goal_obs[0],
        reward=float(b.reward[0]), done=bool(b.done[0]),
        traj_index=int(b.traj_index[0]), t=int(b.t[0]), goal_index=int(b.goal_index[0]),
    )


def offline_count(size: int, offline_fraction: float = 0.6) -> int:
    """Number of offline elements in a mixed batch (round half up)."""
    return int(np.floor(offline_fraction * size + 0.5))


def mix_batch(
    offline_buf: TrajectoryBuffer,
    online_buf: TrajectoryBuffer,
    size: int = 128,
    rng: np.random.Generator | None = None,
    offline_cfg: RelabelConfig = RelabelConfig(0.0),
    online_cfg: RelabelConfig = RelabelConfig(0.3),
    offline_fraction: float = 0.6,
) -> Batch:
    """Concatenate an offline and an online relabeled batch with a fixed split."""
    if size <= 0:
        raise ValueError(f"batch size must be positive, got {size}")
    rng = rng if rng is not None else np.random.default_rng()
    if len(online_buf) == 0:
        batch = offline_buf.sample(size, offline_cfg, rng)
        batch.online_empty_warning = True
        return batch
    n_off = offline_count(size, offline_fraction)
    parts = []
    if n_off > 0:
        parts.append(offline_buf.sample(n_off, offline_cfg, rng))
    if size - n_off > 0:
        on = online_buf.sample(size - n_off, online_cfg, rng)
        on.provenance[:] = Provenance.ONLINE
        parts.append(on)
    if len(parts) == 1:
        return parts[0]
    a, b = parts
    return Batch(
        obs=np.concatenate([a.obs, b.obs]),
        action=np.concatenate([a.action, b.action]),
        next_obs=np.concatenate([a.next_obs, b.next_obs]),
        goal_obs=np.concatenate([a.goal_obs, b.goal_obs]),
        reward=np.concatenate([a.reward, b.reward]),
        done=np.concatenate([a.done, b.done]),
        provenance=np.concatenate([a.provenance, b.provenance]),
        t=np.concatenate([a.t, b.t]),
        goal_index=np.concatenate([a.goal_index, b.goal_index]),
        traj_index=np.concatenate([a.traj_index, b.traj_index]),
    )
