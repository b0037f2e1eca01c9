"""Per-switch fragment runtime.

A fragment is one sketch row on one switch. It splits every epoch into
``n`` equal subepochs (``n`` a power of two), hashes each flow to one of
them, and only counts a flow while its subepoch is active. At the end of
each subepoch it exports a :class:`~disketch.records.SubepochRecord`; at
the end of each epoch it averages its per-subepoch error estimates and
doubles, halves, or keeps ``n`` for the next epoch.

:class:`Fragment` is the packet-at-a-time reference implementation. The
replay driver in :mod:`disketch.workload` has a vectorized path that
reuses the helpers defined here and is tested against this class.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .records import RecordSeeds, SubepochRecord
from .sketch import (
    DEFAULT_LEVELS,
    CountMinRow,
    CountRow,
    LevelStack,
    Purpose,
    SketchKind,
    hash_index,
    key_fingerprint,
    mix64,
)

COUNTER_BYTES = 8


class ExportMode(str, enum.Enum):
    RESET = "reset"
    DELTA = "delta"


class Adaptation(str, enum.Enum):
    MOVING = "moving"
    ONESHOT = "oneshot"
    FIXED = "fixed"


class SubepochMethod(str, enum.Enum):
    TIMESTAMP = "timestamp"
    COUNTER = "counter"


class ConfigError(ValueError):
    pass


class OrderingError(RuntimeError):
    """A packet or clock arrived out of order (a replay driver bug)."""


def is_power_of_two(x: int) -> bool:
    return x >= 1 and not x & (x - 1)


def width_for(memory_bytes: int, kind: SketchKind, levels: int = DEFAULT_LEVELS) -> int:
    per_counter = COUNTER_BYTES * (levels if SketchKind(kind) is SketchKind.UM else 1)
    return memory_bytes // per_counter


def fragment_seed(run_seed: int, fragment_id: str) -> int:
    return mix64(run_seed, key_fingerprint(fragment_id))


@dataclass(frozen=True)
class FragmentConfig:
    fragment_id: str
    sketch_kind: SketchKind
    memory_bytes: int
    rho_target: float
    epoch_duration_ticks: int = 1 << 20
    max_subepochs: int = 256
    single_hop_mitigation: bool = False
    export_mode: ExportMode = ExportMode.RESET
    seed: int = 0
    level_seed: int = 0
    levels: int = DEFAULT_LEVELS
    adaptation: Adaptation = Adaptation.MOVING
    initial_subepochs: int = 1
    refresh_row_seeds: bool = True
    subepoch_method: SubepochMethod = SubepochMethod.TIMESTAMP

    def __post_init__(self):
        for name, enum_cls in (("sketch_kind", SketchKind), ("export_mode", ExportMode),
                               ("adaptation", Adaptation), ("subepoch_method", SubepochMethod)):
            object.__setattr__(self, name, enum_cls(getattr(self, name)))
        if self.rho_target <= 0:
            raise ConfigError("rho_target must be positive")
        if not is_power_of_two(self.epoch_duration_ticks):
            raise ConfigError("epoch_duration_ticks must be a power of two")
        if not is_power_of_two(self.max_subepochs) or self.max_subepochs > self.epoch_duration_ticks:
            raise ConfigError("max_subepochs must be a power of two no larger than the epoch")
        if not is_power_of_two(self.initial_subepochs) or self.initial_subepochs > self.max_subepochs:
            raise ConfigError("initial_subepochs must be a power of two <= max_subepochs")
        if self.width < 1:
            raise ConfigError(f"{self.memory_bytes} bytes give zero counters for {self.sketch_kind.value}")

    @property
    def width(self) -> int:
        return width_for(self.memory_bytes, self.sketch_kind, self.levels)


def epoch_seeds(config: FragmentConfig, epoch: int) -> RecordSeeds:
    """Hash seeds a fragment uses during ``epoch``."""
    row_epoch = epoch if config.refresh_row_seeds else 0
    kind = config.sketch_kind
    return RecordSeeds(
        index=mix64(config.seed, row_epoch, Purpose.INDEX),
        subepoch=mix64(config.seed, epoch, Purpose.SUBEPOCH),
        sign=None if kind is SketchKind.CMS else mix64(config.seed, row_epoch, Purpose.SIGN),
        level=mix64(config.level_seed, epoch, Purpose.LEVEL) if kind is SketchKind.UM else None,
    )


def subepoch_from_timestamp(T: int, T_e: int, n: int) -> int:
    """Current subepoch read from the timestamp bits ``[log2 T_e - 1 : log2(T_e / n)]``."""
    if not (is_power_of_two(T_e) and is_power_of_two(n)):
        raise ConfigError("T_e and n must be powers of two")
    if n > T_e:
        raise ConfigError(f"n={n} exceeds epoch length {T_e}")
    low = (T_e // n).bit_length() - 1
    return (T >> low) & (n - 1)


class SubepochCounter:
    """Direct subepoch identification: a counter bumped at each subepoch end."""

    def __init__(self, T_e: int, n: int, start: int = 0):
        if n > T_e:
            raise ConfigError(f"n={n} exceeds epoch length {T_e}")
        self.length = T_e // n
        self.n = n
        self.value = 0
        self._next_end = start + self.length

    def tick(self, T: int) -> int:
        while T >= self._next_end:
            self.value = (self.value + 1) % self.n
            self._next_end += self.length
        return self.value


def subepoch_rho_hat(counters: np.ndarray, kind: SketchKind) -> float:
    """Counter-based error-bound estimate of one subepoch row.

    ``sqrt(sum c_i^2 / w)`` for Count Sketch rows, ``sum c_i / w`` for
    Count-Min rows. UnivMon stacks use level 0.
    """
    kind = SketchKind(kind)
    c = np.asarray(counters)
    if kind is SketchKind.UM and c.ndim == 2:
        c = c[0]
    c = c.astype(np.float64)
    w = c.shape[-1]
    if kind is SketchKind.CMS:
        return float(c.sum() / w)
    return float(math.sqrt(float(np.dot(c, c)) / w))


def next_subepoch_count(n: int, mean_rho: float, rho_target: float, max_subepochs: int,
                        mode: Adaptation = Adaptation.MOVING) -> int:
    mode = Adaptation(mode)
    if mode is Adaptation.FIXED:
        return n
    if mode is Adaptation.MOVING:
        if mean_rho > 2 * rho_target:
            nxt = 2 * n
        elif mean_rho < rho_target / 2:
            nxt = max(1, n // 2)
        else:
            nxt = n
    else:
        ratio = mean_rho / rho_target
        exp = math.floor(max(0.0, math.log2(ratio)) + 0.5) if ratio > 0 else 0
        nxt = 1 << min(exp, 62)
    return min(nxt, max_subepochs)


def mitigated_subepochs_for(s: int, n: int) -> tuple[int, ...]:
    """Subepochs sampling a single-hop flow whose regular subepoch is ``s``."""
    if n < 2:
        return (s,)
    return (s, (s + n // 2) % n)


class Fragment:
    """Packet-at-a-time fragment state machine."""

    def __init__(self, config: FragmentConfig, start_epoch: int = 0):
        self.config = config
        self.epoch = start_epoch
        self.n = config.initial_subepochs
        self.current_subepoch = 0
        self.rho_hat_sum = 0.0
        self.subepochs_completed = 0
        self.rho_history: list[float] = []
        self.n_history: list[int] = []
        self._begin_epoch()

    # -- epoch bookkeeping -------------------------------------------------

    def _begin_epoch(self) -> None:
        cfg = self.config
        self.seeds = epoch_seeds(cfg, self.epoch)
        self.subepoch_seed = self.seeds.subepoch_seed
        if cfg.sketch_kind is SketchKind.CMS:
            self.row = CountMinRow(cfg.width, self.seeds.index_seed)
        elif cfg.sketch_kind is SketchKind.CS:
            self.row = CountRow(cfg.width, self.seeds.index_seed, self.seeds.sign_seed)
        else:
            self.row = LevelStack(cfg.width, self.seeds.index_seed, self.seeds.sign_seed,
                                  self.seeds.level_seed, cfg.levels)
        self._snapshot = np.zeros_like(self._raw_counters())
        self._counter = SubepochCounter(cfg.epoch_duration_ticks, self.n, self.epoch_start)
        self.current_subepoch = 0
        self.rho_hat_sum = 0.0

    @property
    def epoch_start(self) -> int:
        return self.epoch * self.config.epoch_duration_ticks

    @property
    def subepoch_length(self) -> int:
        return self.config.epoch_duration_ticks // self.n

    @property
    def subepoch_end(self) -> int:
        return self.epoch_start + (self.current_subepoch + 1) * self.subepoch_length

    def _raw_counters(self) -> np.ndarray:
        return np.array(self.row.counters, copy=True)

    # -- sampling ------------------------------------------------------------

    def subepoch_of(self, fingerprint: int) -> int:
        return hash_index(self.subepoch_seed, fingerprint, self.n)

    def mitigated_subepochs(self, fingerprint: int) -> tuple[int, ...]:
        return mitigated_subepochs_for(self.subepoch_of(fingerprint), self.n)

    def sampling_subepochs(self, fingerprint: int, single_hop: bool) -> tuple[int, ...]:
        if single_hop and self.config.single_hop_mitigation:
            return self.mitigated_subepochs(fingerprint)
        return (self.subepoch_of(fingerprint),)

    def subepoch_at(self, T: int) -> int:
        if self.config.subepoch_method is SubepochMethod.TIMESTAMP:
            return subepoch_from_timestamp(T, self.config.epoch_duration_ticks, self.n)
        return self._counter.tick(T)

    def process_packet(self, fingerprint: int, timestamp: int, single_hop: bool = False,
                       weight: int = 1) -> bool:
        """Count the packet if its flow is sampled now. Returns whether a counter moved."""
        start = self.epoch_start + self.current_subepoch * self.subepoch_length
        if timestamp < start:
            raise OrderingError(f"packet at {timestamp} precedes subepoch start {start}")
        if timestamp >= self.subepoch_end:
            raise OrderingError(f"packet at {timestamp} is past subepoch end {self.subepoch_end}")
        S = self.subepoch_at(timestamp)
        if S != self.current_subepoch:
            raise OrderingError(f"subepoch identification mismatch: {S} != {self.current_subepoch}")
        if S not in self.sampling_subepochs(fingerprint, single_hop):
            return False
        self.row.update(fingerprint, weight)
        return True

    # -- boundaries ------------------------------------------------------------

    def end_subepoch(self, clock: int | None = None) -> SubepochRecord:
        if clock is not None and clock != self.subepoch_end:
            raise OrderingError(f"end_subepoch at {clock}, expected {self.subepoch_end}")
        cur = self._raw_counters()
        exported = cur - self._snapshot
        if self.config.export_mode is ExportMode.RESET:
            self.row.reset()
        else:
            self._snapshot = cur
        record = SubepochRecord(
            fragment_id=self.config.fragment_id,
            epoch=self.epoch,
            subepoch=self.current_subepoch,
            n=self.n,
            width=self.config.width,
            kind=self.config.sketch_kind,
            seeds=self.seeds,
            counters=exported,
        )
        self.rho_hat_sum += subepoch_rho_hat(exported, self.config.sketch_kind)
        self.subepochs_completed += 1
        self.current_subepoch += 1
        return record

    def end_epoch(self) -> None:
        if self.current_subepoch != self.n:
            raise OrderingError(f"epoch {self.epoch} ended after {self.current_subepoch}/{self.n} subepochs")
        mean_rho = self.rho_hat_sum / self.n
        self.rho_history.append(mean_rho)
        self.n_history.append(self.n)
        cfg = self.config
        self.n = next_subepoch_count(self.n, mean_rho, cfg.rho_target, cfg.max_subepochs, cfg.adaptation)
        self.epoch += 1
        self._begin_epoch()

    def advance_to(self, T: int) -> list[SubepochRecord]:
        """Close every subepoch (and epoch) that ends at or before tick ``T``."""
        out = []
        while T >= self.subepoch_end:
            out.append(self.end_subepoch(self.subepoch_end))
            if self.current_subepoch == self.n:
                self.end_epoch()
        return out


__all__ = [
    "Adaptation",
    "ConfigError",
    "ExportMode",
    "Fragment",
    "FragmentConfig",
    "OrderingError",
    "SubepochCounter",
    "SubepochMethod",
    "epoch_seeds",
    "fragment_seed",
    "mitigated_subepochs_for",
    "next_subepoch_count",
    "subepoch_from_timestamp",
    "subepoch_rho_hat",
    "width_for",
]
