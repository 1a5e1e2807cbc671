"""Round loop for FedAVG, TEFL, AFL and TWAFL.

Every round the server picks ``m`` clients. In a flag round they download
the full central model and upload a full trained model; otherwise only the
shallow blocks travel in either direction and each client keeps its own deep
blocks. The server then re-aggregates the shallow partition over the latest
copy it holds from every client, and the deep partition in flag rounds only.
TEFL/TWAFL down-weight each copy by ``a ** -(rounds since upload)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .aggregation import ClientUploadView, fedavg_aggregate, temporally_weighted_aggregate
from .data import ClientDataset, DataPool, generate_all_clients
from .metrics import RoundRecord, global_loss
from .model import Batch, ModelSpec, accuracy, client_sgd, dense_spec, init_params
from .params import LayeredParams, ParamBlock, Selector, StructureError, partition_sizes

Variant = Literal["FedAVG", "TEFL", "AFL", "TWAFL"]
VARIANTS: tuple[str, ...] = ("FedAVG", "TEFL", "AFL", "TWAFL")
SYNCHRONOUS = ("FedAVG", "TEFL")
TEMPORAL = ("TEFL", "TWAFL")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def es_rounds_for_freq(fe: int, T: int) -> frozenset[int]:
    """The last ``fe`` positions of a ``T``-round loop, loop end written as 0."""
    if T < 1:
        raise ValueError(f"rounds_in_loop must be >= 1, got {T}")
    if not 1 <= fe <= T:
        raise ValueError(f"need 1 <= fe <= rounds_in_loop, got fe={fe}, T={T}")
    return frozenset(t % T for t in range(T - fe + 1, T + 1))


@dataclass(frozen=True)
class ProtocolConfig:
    variant: str = "TWAFL"
    K: int = 20
    C: float = 0.1
    a: float = math.e / 2
    rounds_in_loop: int = 15
    es_rounds: frozenset = frozenset({11, 12, 13, 14, 0})
    B: int = 32
    E: int = 5
    eta: float = 0.05
    total_rounds: int = 200
    normalize_weights: bool = True
    seed: int = 0
    # model and data layout
    hidden: tuple = (16, 64)
    split_layers: int = 1
    n_c_choices: tuple = (2, 3)
    s_min: int = 100
    s_max: int = 160
    test_fraction: float = 0.2
    replacement: bool = False
    threshold: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "es_rounds", frozenset(int(r) for r in self.es_rounds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "n_c_choices", tuple(int(n) for n in self.n_c_choices))
        self.validate()

    @property
    def fe(self) -> int:
        return len(self.es_rounds)

    @property
    def m(self) -> int:
        return participants_per_round(self.K, self.C)

    @property
    def decay_base(self) -> float:
        return self.a if self.variant in TEMPORAL else 1.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.K < 1:
            raise ConfigError("K", "must be >= 1")
        if not 0 < self.C <= 1:
            raise ConfigError("C", "must lie in (0, 1]")
        if self.a <= 0:
            raise ConfigError("a", "must be positive")
        if self.rounds_in_loop < 1:
            raise ConfigError("rounds_in_loop", "must be >= 1")
        if not self.es_rounds:
            raise ConfigError("es_rounds", "must name at least one loop position")
        if any(not 0 <= r < self.rounds_in_loop for r in self.es_rounds):
            raise ConfigError("es_rounds", f"positions must lie in [0, {self.rounds_in_loop})")
        if self.variant in SYNCHRONOUS and self.fe != self.rounds_in_loop:
            raise ConfigError("es_rounds", f"{self.variant} exchanges the full model every round")
        if self.variant == "AFL" and self.a != 1:
            raise ConfigError("a", "AFL uses untimed weighting, a must be 1")
        if self.B < 1:
            raise ConfigError("B", "must be >= 1")
        if self.E < 1:
            raise ConfigError("E", "must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta", "must be non-negative")
        if self.total_rounds < 0:
            raise ConfigError("total_rounds", "must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "needs at least one positive layer width")
        if not 1 <= self.split_layers <= len(self.hidden):
            raise ConfigError("split_layers", f"must lie in [1, {len(self.hidden)}]")
        if not self.n_c_choices or min(self.n_c_choices) < 1:
            raise ConfigError("n_c_choices", "must be non-empty positive counts")
        if not 1 <= self.s_min <= self.s_max:
            raise ConfigError("s_min", "need 1 <= s_min <= s_max")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold", "must lie in [0, 1]")

    def with_variant(self, variant: str) -> "ProtocolConfig":
        """Same settings under another variant, applying its fixed rules."""
        es = frozenset(range(self.rounds_in_loop)) if variant in SYNCHRONOUS else self.es_rounds
        a = 1.0 if variant in ("AFL", "FedAVG") else self.a
        return replace(self, variant=variant, es_rounds=es, a=a)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return dense_spec(input_dim, self.hidden, num_classes, self.split_layers)


def participants_per_round(K: int, C: float) -> int:
    """``max(C*K, 1)`` with C*K rounded half-up."""
    return max(int(math.floor(C * K + 0.5)), 1)


def flag_for_round(t: int, config: ProtocolConfig) -> bool:
    if t < 1:
        raise ValueError(f"rounds are numbered from 1, got {t}")
    return (t % config.rounds_in_loop) in config.es_rounds


def select_clients(K: int, C: float, rng: np.random.Generator) -> tuple[int, ...]:
    if not 0 < C <= 1:
        raise ValueError(f"C must lie in (0, 1], got {C}")
    m = participants_per_round(K, C)
    return tuple(sorted(int(k) for k in rng.choice(K, size=m, replace=False)))


@dataclass(frozen=True, eq=False)
class ModelTransfer:
    """Blocks sent over the wire: the whole model or its shallow partition."""

    selector: Selector
    blocks: tuple[ParamBlock, ...]

    @classmethod
    def of(cls, params: LayeredParams, full: bool) -> "ModelTransfer":
        blocks = params.blocks if full else params.shallow
        return cls("all" if full else "shallow", blocks)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def apply_to(self, params: LayeredParams) -> LayeredParams:
        idx = params.block_range(self.selector)
        if [params.blocks[i].shape for i in idx] != [b.shape for b in self.blocks]:
            raise StructureError("transferred blocks do not match the local model layout")
        blocks = list(params.blocks)
        for i, b in zip(idx, self.blocks):
            blocks[i] = b
        return LayeredParams(tuple(blocks), params.split_index)


@dataclass(frozen=True, eq=False)
class ClientLocalState:
    client_id: int
    retained: LayeredParams
    dataset: ClientDataset
    data: Batch


@dataclass(eq=False)
class ServerState:
    round: int
    central: LayeredParams
    client_views: dict[int, ClientUploadView]
    cumulative_params: int = 0


@dataclass(eq=False)
class Environment:
    """Fixed inputs shared by every round of one experiment."""

    spec: ModelSpec
    train: DataPool
    test: Batch
    datasets: list[ClientDataset]


def client_rng(seed: int, t: int, k: int) -> np.random.Generator:
    """Per-(round, client) stream, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([seed, t, k, 1]))


def client_update(state: ClientLocalState, downloaded: ModelTransfer, flag: bool,
                  config: ProtocolConfig, spec: ModelSpec,
                  rng: np.random.Generator) -> tuple[ClientLocalState, ModelTransfer]:
    expected = "all" if flag else "shallow"
    if downloaded.selector != expected:
        raise StructureError(
            f"flag={flag} round expects a {expected} download, got {downloaded.selector}"
        )
    start = downloaded.apply_to(state.retained)
    trained = client_sgd(spec, start, state.data, config.B, config.E, config.eta, rng)
    return replace(state, retained=trained), ModelTransfer.of(trained, full=flag)


def initial_state(central: LayeredParams, datasets: Sequence[ClientDataset]) -> ServerState:
    views = {
        d.client_id: ClientUploadView(d.client_id, central, 0, 0, d.n_k)
        for d in datasets
    }
    return ServerState(0, central, views)


def aggregate(views: Sequence[ClientUploadView], selector: Selector, t: int,
              config: ProtocolConfig) -> LayeredParams:
    if config.variant == "FedAVG":
        return fedavg_aggregate(views, selector)
    return temporally_weighted_aggregate(views, selector, t, config.decay_base,
                                         config.normalize_weights)


def run_round(server: ServerState, clients: dict[int, ClientLocalState], config: ProtocolConfig,
              rng: np.random.Generator, env: Environment
              ) -> tuple[ServerState, dict[int, ClientLocalState], RoundRecord]:
    t = server.round + 1
    flag = flag_for_round(t, config)
    chosen = select_clients(config.K, config.C, rng)

    views = dict(server.client_views)
    clients = dict(clients)
    down = up = 0
    for k in chosen:
        downloaded = ModelTransfer.of(server.central, full=flag)
        clients[k], upload = client_update(
            clients[k], downloaded, flag, config, env.spec, client_rng(config.seed, t, k)
        )
        down += downloaded.size
        up += upload.size
        old = views[k]
        views[k] = ClientUploadView(
            k, upload.apply_to(old.params), t, t if flag else old.timestamp_s, old.n_k
        )

    ordered = [views[k] for k in sorted(views)]
    central = server.central.replace("shallow", aggregate(ordered, "shallow", t, config))
    if flag:
        central = central.replace("deep", aggregate(ordered, "deep", t, config))

    cumulative = server.cumulative_params + down + up
    record = RoundRecord(
        round=t,
        flag=flag,
        participants=chosen,
        test_accuracy=accuracy(env.spec, central, env.test),
        global_loss=global_loss(central, env.datasets, env.spec, env.train),
        params_down=down,
        params_up=up,
        cumulative_params=cumulative,
    )
    return ServerState(t, central, views, cumulative), clients, record


@dataclass(eq=False)
class ExperimentResult:
    records: list[RoundRecord]
    server: ServerState
    clients: dict[int, ClientLocalState]
    env: Environment
    initial: LayeredParams

    @property
    def partition_sizes(self) -> tuple[int, int]:
        return partition_sizes(self.initial)


def setup(config: ProtocolConfig, pool: DataPool
          ) -> tuple[ServerState, dict[int, ClientLocalState], Environment, np.random.Generator]:
    split_ss, part_ss, init_ss, select_ss = np.random.SeedSequence(config.seed).spawn(4)
    train, test = pool.split(config.test_fraction, np.random.default_rng(split_ss))
    datasets = generate_all_clients(
        train, train.classes, config.n_c_choices, config.s_min, config.s_max, config.K,
        np.random.default_rng(part_ss), config.replacement,
    )
    empty = [d.client_id for d in datasets if d.n_k == 0]
    if empty:
        raise ConfigError("s_min", f"clients {empty} received no samples")
    spec = config.model_spec(pool.input_dim, int(pool.labels.max()) + 1)
    central = init_params(spec, np.random.default_rng(init_ss))
    env = Environment(spec, train, test.batch(), datasets)
    clients = {
        d.client_id: ClientLocalState(d.client_id, central, d, train.batch(d.sample_indices))
        for d in datasets
    }
    return initial_state(central, datasets), clients, env, np.random.default_rng(select_ss)


def simulate(config: ProtocolConfig, pool: DataPool) -> ExperimentResult:
    server, clients, env, rng = setup(config, pool)
    initial = server.central
    records = []
    for _ in range(config.total_rounds):
        server, clients, record = run_round(server, clients, config, rng, env)
        records.append(record)
    return ExperimentResult(records, server, clients, env, initial)


def run_experiment(config: ProtocolConfig, pool: DataPool) -> list[RoundRecord]:
    return simulate(config, pool).records


# Flat "key = value" config files. Unknown keys are errors; "freq = 5/15"
# is shorthand for rounds_in_loop = 15 plus the last five loop positions.

_FIELD_TYPES = {f.name: f.type for f in fields(ProtocolConfig)}


def parse_real(text: str) -> float:
    s = text.strip().replace(" ", "")
    if s == "e":
        return math.e
    if s.startswith("e/"):
        return math.e / float(s[2:])
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _parse_bool(text: str) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace("{", "").replace("}", "").replace(",", " ").split())


def parse_field(name: str, text: str):
    kind = _FIELD_TYPES.get(name)
    if kind is None:
        raise ConfigError(name, "unknown config field")
    try:
        if kind == "str":
            return text.strip()
        if kind == "int":
            return int(text)
        if kind == "float":
            return parse_real(text)
        if kind == "bool":
            return _parse_bool(text)
        if kind in ("frozenset", "tuple"):
            return _int_list(text)
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {text!r}: {exc}") from None
    raise ConfigError(name, f"unsupported field type {kind}")


def parse_freq(text: str) -> tuple[int, frozenset[int]]:
    frac = text.strip().replace(" ", "")
    if "/" not in frac:
        raise ConfigError("freq", f"expected fe/T, got {text!r}")
    fe, T = (int(x) for x in frac.split("/", 1))
    try:
        return T, es_rounds_for_freq(fe, T)
    except ValueError as exc:
        raise ConfigError("freq", str(exc)) from None


def freq_label(config: ProtocolConfig) -> str:
    return f"{config.fe}/{config.rounds_in_loop}"


def config_overrides(pairs: dict[str, str]) -> dict:
    """Typed ProtocolConfig keyword arguments from raw string values."""
    out = {}
    for key, value in pairs.items():
        if key == "freq":
            out["rounds_in_loop"], out["es_rounds"] = parse_freq(value)
        else:
            out[key] = parse_field(key, value)
    return out


def read_key_values(path: str | Path) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path: str | Path) -> ProtocolConfig:
    return make_config(read_key_values(path))


def make_config(pairs: dict[str, str], base: ProtocolConfig | None = None) -> ProtocolConfig:
    """Apply string overrides to ``base``.

    Naming a variant also applies its fixed rules (full schedule for
    FedAVG/TEFL, a = 1 for FedAVG/AFL); explicit values are re-applied after
    that and validated against them.
    """
    kwargs = config_overrides(pairs)
    config = base or ProtocolConfig()
    variant = kwargs.pop("variant", None)
    if variant is not None and variant not in VARIANTS:
        raise ConfigError("variant", f"must be one of {VARIANTS}, got {variant!r}")
    if variant is None:
        return replace(config, **kwargs)
    loose = {k: v for k, v in kwargs.items() if k not in ("es_rounds", "a")}
    # validate the schedule under the target variant, not the base one
    config = replace(config, variant="TWAFL", **loose)
    if "es_rounds" in kwargs or "a" in kwargs:
        fixed = {k: kwargs[k] for k in ("es_rounds", "a") if k in kwargs}
        if variant not in SYNCHRONOUS and "es_rounds" in fixed:
            config = replace(config, es_rounds=fixed["es_rounds"])
        config = config.with_variant(variant)
        return replace(config, **fixed)
    return config.with_variant(variant)


def dump_config(config: ProtocolConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, frozenset):
            text = ",".join(str(v) for v in sorted(value))
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
