"""Run configuration: flat ``dotted.key = value`` text files, overridable per key."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from mera.clmethods import MethodConfig, TrainConfig
from mera.errors import ConfigError
from mera.modalities import ModalitySpec
from mera.seeding import derive_seed

SEQUENTIAL = ("image", "video", "audio", "pointcloud")
NAMED_ORDERS = {"sequential": SEQUENTIAL, "reverse": tuple(reversed(SEQUENTIAL))}

DEFAULT_MODALITIES = {
    "image": ModalitySpec("image", 24, render_seed=11),
    "video": ModalitySpec("video", 32, render_seed=23),
    "audio": ModalitySpec("audio", 20, render_seed=37),
    "pointcloud": ModalitySpec("pointcloud", 28, render_seed=41),
}


@dataclass(frozen=True)
class Dims:
    latent: int = 8
    feat: int = 16
    embed: int = 16
    encoder_hidden: int = 128
    classes: int = 4


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 2000   # per sub-task
    test_size: int = 500


@dataclass(frozen=True)
class Seeds:
    """Role seeds; ``-1`` means derive from the top-level ``seed``."""

    data: int = -1
    task: int = -1
    init: int = -1
    train: int = -1
    replay: int = -1
    fisher: int = -1

    def resolve(self, master: int) -> "Seeds":
        vals = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            vals[f.name] = derive_seed(master, "role", f.name) if v < 0 else v
        return Seeds(**vals)


@dataclass(frozen=True)
class RunConfig:
    order: tuple[str, ...] = SEQUENTIAL
    modalities: dict[str, ModalitySpec] = field(default_factory=lambda: dict(DEFAULT_MODALITIES))
    method: MethodConfig = field(default_factory=MethodConfig)
    dims: Dims = field(default_factory=Dims)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: Seeds = field(default_factory=Seeds)
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    @property
    def resolved_seeds(self) -> Seeds:
        return self.seeds.resolve(self.seed)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        flat = to_flat(self)
        flat.update(overrides)
        return from_flat(flat)

    def run_id(self) -> str:
        order = order_label(self.order, sep="-")
        m = self.method
        tag = m.name + (f"{round(m.r * 100)}" if m.name in ("replay", "mera") else "")
        if m.realign:
            tag += "+realign"
        if m.mispair_p:
            tag += f"-noisy{round(m.mispair_p * 100)}"
        return f"{tag}_{order}_seed{self.seed}"

    def expert_key(self) -> str:
        """Hash of everything an expert upper bound depends on."""
        flat = to_flat(self)
        keep = {k: v for k, v in flat.items()
                if k.split(".")[0] in ("dims", "data", "train", "seeds", "modality", "seed")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def order_label(order, sep: str = ",") -> str:
    """``sequential`` / ``reverse`` for the named orders, else the ids joined by ``sep``."""
    for name, seq in NAMED_ORDERS.items():
        if tuple(order) == seq:
            return name
    return sep.join(order)


def validate(cfg: RunConfig) -> None:
    if not cfg.order:
        raise ConfigError("order", "must name at least one modality")
    if len(set(cfg.order)) != len(cfg.order):
        raise ConfigError("order", "modality ids must be unique")
    for m in cfg.order:
        if m not in cfg.modalities:
            raise ConfigError("order", f"modality {m!r} has no modality.{m}.* spec")
    for m, spec in cfg.modalities.items():
        if spec.modality_id != m:
            raise ConfigError(f"modality.{m}", "spec id does not match its key")
        if spec.input_dim < cfg.dims.latent:
            raise ConfigError(f"modality.{m}.input_dim", f"must be >= dims.latent ({cfg.dims.latent})")
    for f in dataclasses.fields(cfg.dims):
        if getattr(cfg.dims, f.name) <= 0:
            raise ConfigError(f"dims.{f.name}", "must be positive")
    for f in dataclasses.fields(cfg.data):
        if getattr(cfg.data, f.name) <= 0:
            raise ConfigError(f"data.{f.name}", "must be positive")
    t = cfg.train
    for name in ("pretrain_epochs", "finetune_epochs", "realign_epochs"):
        if getattr(t, name) < 0:
            raise ConfigError(f"train.{name}", "must be >= 0")
    for name in ("pretrain_batch", "finetune_batch", "realign_batch"):
        if getattr(t, name) <= 0:
            raise ConfigError(f"train.{name}", "must be positive")
    if t.optimizer not in ("adam", "sgd"):
        raise ConfigError("train.optimizer", "must be adam or sgd")
    if t.schedule not in ("cosine", "constant"):
        raise ConfigError("train.schedule", "must be cosine or constant")


# ---------------------------------------------------------------------------
# flat <-> structured
# ---------------------------------------------------------------------------

_SECTIONS = {"method": MethodConfig, "dims": Dims, "data": DataConfig, "train": TrainConfig, "seeds": Seeds}
_SPEC_FIELDS = ("input_dim", "render_seed", "noise_sigma", "gain")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def to_flat(cfg: RunConfig) -> dict[str, str]:
    flat = {"order": ",".join(cfg.order), "seed": str(cfg.seed), "output_dir": cfg.output_dir}
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            flat[f"{sec}.{f.name}"] = _fmt(getattr(obj, f.name))
    for m, spec in sorted(cfg.modalities.items()):
        for k in _SPEC_FIELDS:
            flat[f"modality.{m}.{k}"] = _fmt(getattr(spec, k))
    return flat


def known_key(key: str) -> bool:
    if key in ("order", "seed", "output_dir"):
        return True
    parts = key.split(".")
    if parts[0] == "modality":
        return len(parts) == 3 and parts[2] in _SPEC_FIELDS
    if parts[0] in _SECTIONS and len(parts) == 2:
        return parts[1] in {f.name for f in dataclasses.fields(_SECTIONS[parts[0]])}
    return False


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def from_flat(flat: dict[str, str]) -> RunConfig:
    for key in flat:
        if not known_key(key):
            raise ConfigError(key, "unknown configuration key")
    kwargs = {}
    for sec, cls in _SECTIONS.items():
        vals = {}
        for f in dataclasses.fields(cls):
            key = f"{sec}.{f.name}"
            if key in flat:
                vals[f.name] = _coerce(key, flat[key], f.type)
        try:
            kwargs[sec] = cls(**vals)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(sec, str(exc)) from None

    order_raw = flat.get("order", "sequential").strip()
    order = NAMED_ORDERS.get(order_raw) or tuple(s.strip() for s in order_raw.split(",") if s.strip())
    mods = dict(DEFAULT_MODALITIES)
    mod_keys: dict[str, dict] = {}
    for key, raw in flat.items():
        if key.startswith("modality."):
            _, m, k = key.split(".")
            typ = float if k in ("noise_sigma", "gain") else int
            mod_keys.setdefault(m, {})[k] = _coerce(key, raw, typ)
    for m, vals in mod_keys.items():
        base = mods.get(m)
        if base is None:
            need = [k for k in ("input_dim", "render_seed") if k not in vals]
            if need:
                raise ConfigError(f"modality.{m}.{need[0]}", "required for a new modality")
            base = ModalitySpec(m, vals["input_dim"], vals["render_seed"])
        try:
            mods[m] = dataclasses.replace(base, **vals)
        except ValueError as exc:
            raise ConfigError(f"modality.{m}", str(exc)) from None
    seed = _coerce("seed", flat.get("seed", "0"), int)
    return RunConfig(order=order, modalities=mods, seed=seed,
                     output_dir=flat.get("output_dir", "runs/default"), **kwargs)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not known_key(key):
            raise ConfigError(key, f"unknown configuration key ({source}:{lineno})")
        flat[key] = value
    return flat


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    flat = to_flat(RunConfig())
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(), str(path)))
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(to_flat(cfg).items()))
