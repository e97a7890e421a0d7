"""Experiment configuration: a closed-key hierarchical file, validated hard.

Unknown keys are errors, not warnings; every error names the dotted key
path. Defaults are filled at load and echoed back out, so a run directory's
`config_echo.json` alone reproduces the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .distill import DistillConfig
from .errors import ConfigError
from .model import ArchSpec

TOPOLOGIES = ("ring", "star", "complete", "custom")
FEATURE_CELL_CAP = 64


@dataclass(frozen=True)
class ModelSpec:
    patch_size: int = 4
    embed_dim: int = 16


@dataclass(frozen=True)
class DataSpec:
    classes: int = 8
    per_class: int = 40
    eval_per_class: int = 10
    side: int = 8
    noise: float = 0.1
    unseen_fraction: float = 1.0
    batch: int = 16
    manifest: str | None = None
    eval_fraction: float = 0.2


@dataclass(frozen=True)
class EmdSpec:
    marginal_scheme: str = "uniform"
    clamp: bool = True
    tol: float = 1e-8
    max_iter: int = 100


@dataclass(frozen=True)
class FederationSpec:
    overseas_steps: int = 5
    pretrain_steps: int = 50
    shared_init: bool = False
    no_emd_weighting: bool = False
    no_distillation: bool = False
    cfl_averaging: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    silos: int = 4
    topology: str = "ring"
    edges: tuple = ()
    rounds: int = 10
    eval_every: int = 1
    participants: tuple = ()
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    emd: EmdSpec = field(default_factory=EmdSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)

    def arch(self) -> ArchSpec:
        return ArchSpec(
            image_side=self.data.side,
            patch_size=self.model.patch_size,
            embed_dim=self.model.embed_dim,
            n_classes=self.data.classes,
        )

    def variant(self) -> str:
        f = self.federation
        if f.cfl_averaging:
            return "cfl"
        if f.no_distillation:
            return "no_distill"
        if f.no_emd_weighting:
            return "no_emd"
        return "fedemd"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["edges"] = [list(e) for e in self.edges]
        out["participants"] = list(self.participants)
        alpha = self.distill.alpha
        out["distill"]["alpha"] = list(alpha) if isinstance(alpha, tuple) else alpha
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest_bytes(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()

    def digest(self) -> str:
        return self.digest_bytes().hex()


def _err(path: str, message: str) -> ConfigError:
    return ConfigError(f"config key '{path}': {message}")


def _expect(raw: dict, path: str, known: dict) -> None:
    for key in raw:
        if key not in known:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{full}'")


def _get(raw: dict, key: str, path: str, kind, default):
    if key not in raw or raw[key] is None:
        return default
    value = raw[key]
    full = f"{path}.{key}" if path else key
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise _err(full, f"expected int, got bool")
    if not isinstance(value, kind):
        raise _err(full, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _check_range(value, lo, hi, path: str):
    if not lo <= value <= hi:
        raise _err(path, f"must be in [{lo}, {hi}], got {value}")
    return value


def _parse_model(raw: dict) -> ModelSpec:
    _expect(raw, "model", {"patch_size": 1, "embed_dim": 1})
    spec = ModelSpec(
        patch_size=_get(raw, "patch_size", "model", int, 4),
        embed_dim=_get(raw, "embed_dim", "model", int, 16),
    )
    if spec.patch_size < 1:
        raise _err("model.patch_size", f"must be >= 1, got {spec.patch_size}")
    if spec.embed_dim < 1:
        raise _err("model.embed_dim", f"must be >= 1, got {spec.embed_dim}")
    return spec


def _parse_data(raw: dict, base_dir: Path) -> DataSpec:
    known = {
        "classes": 1, "per_class": 1, "eval_per_class": 1, "side": 1, "noise": 1,
        "unseen_fraction": 1, "batch": 1, "manifest": 1, "eval_fraction": 1,
    }
    _expect(raw, "data", known)
    manifest = _get(raw, "manifest", "data", str, None)
    if manifest is not None:
        manifest_path = (base_dir / manifest).resolve()
        if not manifest_path.exists():
            raise _err("data.manifest", f"path does not exist: {manifest_path}")
        side, classes = _scan_manifest(manifest_path)
        # classes/side are derived from the files; reject contradictions but
        # tolerate echoes that carry the derived values back in.
        for key, derived in (("classes", classes), ("side", side)):
            if raw.get(key) not in (None, derived) and key in raw:
                raise _err(f"data.{key}", f"manifest implies {derived}, config says {raw[key]}")
        spec = DataSpec(
            classes=classes,
            side=side,
            manifest=str(manifest_path),
            unseen_fraction=_check_range(
                _get(raw, "unseen_fraction", "data", float, 1.0), 0.0, 1.0,
                "data.unseen_fraction",
            ),
            batch=_get(raw, "batch", "data", int, 16),
            eval_fraction=_check_range(
                _get(raw, "eval_fraction", "data", float, 0.2), 1e-9, 0.5,
                "data.eval_fraction",
            ),
        )
    else:
        spec = DataSpec(
            classes=_get(raw, "classes", "data", int, 8),
            per_class=_get(raw, "per_class", "data", int, 40),
            eval_per_class=_get(raw, "eval_per_class", "data", int, 10),
            side=_get(raw, "side", "data", int, 8),
            noise=_get(raw, "noise", "data", float, 0.1),
            unseen_fraction=_check_range(
                _get(raw, "unseen_fraction", "data", float, 1.0), 0.0, 1.0,
                "data.unseen_fraction",
            ),
            batch=_get(raw, "batch", "data", int, 16),
            eval_fraction=_get(raw, "eval_fraction", "data", float, 0.2),
        )
        if spec.classes < 2:
            raise _err("data.classes", f"must be >= 2, got {spec.classes}")
        if spec.per_class < 1 or spec.eval_per_class < 1:
            raise _err("data.per_class", "per-class counts must be >= 1")
        if spec.noise < 0.0:
            raise _err("data.noise", f"must be >= 0, got {spec.noise}")
    if spec.batch < 1:
        raise _err("data.batch", f"must be >= 1, got {spec.batch}")
    return spec


def _scan_manifest(manifest_path: Path) -> tuple[int, int]:
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.txt"
    labels = []
    first_file = None
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        rel, label = line.rsplit(" ", 1)
        labels.append(int(label))
        if first_file is None:
            first_file = manifest_path.parent / rel
    if first_file is None or not labels:
        raise _err("data.manifest", f"empty manifest {manifest_path}")
    n_bytes = first_file.stat().st_size
    side = int((n_bytes // 4) ** 0.5)
    if side * side * 4 != n_bytes:
        raise _err("data.manifest", f"{first_file} is not a square f32 image")
    return side, max(labels) + 1


def _parse_distill(raw: dict) -> DistillConfig:
    known = {"beta": 1, "temperature": 1, "alpha": 1, "alpha_schedule": 1,
             "normalize_weights": 1}
    _expect(raw, "distill", known)
    if "alpha" in raw and "alpha_schedule" in raw:
        raise _err("distill.alpha_schedule", "give either alpha or alpha_schedule")
    if "alpha_schedule" in raw:
        sched = raw["alpha_schedule"]
        if not isinstance(sched, list) or not sched:
            raise _err("distill.alpha_schedule", "expected a non-empty list")
        alpha: float | tuple = tuple(float(a) for a in sched)
    elif isinstance(raw.get("alpha"), list):  # config echoes store schedules here
        alpha = tuple(float(a) for a in raw["alpha"])
    else:
        alpha = _get(raw, "alpha", "distill", float, 0.01)
    beta = _check_range(_get(raw, "beta", "distill", float, 0.5), 0.0, 1.0, "distill.beta")
    temperature = _get(raw, "temperature", "distill", float, 2.0)
    if temperature <= 0.0:
        raise _err("distill.temperature", f"must be > 0, got {temperature}")
    try:
        return DistillConfig(
            beta=beta,
            temperature=temperature,
            alpha=alpha,
            normalize_weights=_get(raw, "normalize_weights", "distill", bool, False),
        )
    except ValueError as exc:
        raise ConfigError(f"config section 'distill': {exc}") from exc


def _parse_emd(raw: dict) -> EmdSpec:
    _expect(raw, "emd", {"marginal_scheme": 1, "clamp": 1, "tol": 1, "max_iter": 1})
    scheme = _get(raw, "marginal_scheme", "emd", str, "uniform")
    if scheme not in ("uniform", "norm_proportional"):
        raise _err("emd.marginal_scheme", f"must be uniform or norm_proportional, got {scheme!r}")
    tol = _get(raw, "tol", "emd", float, 1e-8)
    if tol <= 0.0:
        raise _err("emd.tol", f"must be > 0, got {tol}")
    max_iter = _get(raw, "max_iter", "emd", int, 100)
    if max_iter < 1:
        raise _err("emd.max_iter", f"must be >= 1, got {max_iter}")
    return EmdSpec(
        marginal_scheme=scheme,
        clamp=_get(raw, "clamp", "emd", bool, True),
        tol=tol,
        max_iter=max_iter,
    )


def _parse_federation(raw: dict) -> FederationSpec:
    known = {"overseas_steps": 1, "pretrain_steps": 1, "shared_init": 1,
             "no_emd_weighting": 1, "no_distillation": 1, "cfl_averaging": 1}
    _expect(raw, "federation", known)
    spec = FederationSpec(
        overseas_steps=_get(raw, "overseas_steps", "federation", int, 5),
        pretrain_steps=_get(raw, "pretrain_steps", "federation", int, 50),
        shared_init=_get(raw, "shared_init", "federation", bool, False),
        no_emd_weighting=_get(raw, "no_emd_weighting", "federation", bool, False),
        no_distillation=_get(raw, "no_distillation", "federation", bool, False),
        cfl_averaging=_get(raw, "cfl_averaging", "federation", bool, False),
    )
    if spec.overseas_steps < 1:
        raise _err("federation.overseas_steps", f"must be >= 1, got {spec.overseas_steps}")
    if spec.pretrain_steps < 1:
        raise _err("federation.pretrain_steps", f"must be >= 1, got {spec.pretrain_steps}")
    exclusive = [spec.no_distillation, spec.cfl_averaging, spec.no_emd_weighting]
    if sum(exclusive) > 1:
        raise _err("federation", "ablation flags are mutually exclusive")
    return spec


def config_from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    base_dir = Path(base_dir)
    top_known = {
        "seed": 1, "silos": 1, "topology": 1, "edges": 1, "rounds": 1,
        "eval_every": 1, "participants": 1, "model": 1, "data": 1,
        "distill": 1, "emd": 1, "federation": 1,
    }
    _expect(raw, "", top_known)
    for section in ("model", "data", "distill", "emd", "federation"):
        if section in raw and not isinstance(raw[section], dict):
            raise _err(section, "expected a table/section")

    silos = _get(raw, "silos", "", int, 4)
    if silos < 1:
        raise _err("silos", f"must be >= 1, got {silos}")
    topology = _get(raw, "topology", "", str, "ring")
    if topology not in TOPOLOGIES:
        raise _err("topology", f"must be one of {TOPOLOGIES}, got {topology!r}")
    edges_raw = raw.get("edges", [])
    if edges_raw and topology != "custom":
        raise _err("edges", "only allowed with topology = 'custom'")
    if topology == "custom" and not edges_raw:
        raise _err("edges", "required when topology = 'custom'")
    edges = []
    for idx, e in enumerate(edges_raw):
        if (not isinstance(e, (list, tuple)) or len(e) != 2
                or not all(isinstance(x, int) for x in e)):
            raise _err(f"edges[{idx}]", f"expected [i, j] ints, got {e!r}")
        i, j = e
        if i == j or not (0 <= i < silos) or not (0 <= j < silos):
            raise _err(f"edges[{idx}]", f"bad edge {e!r} for {silos} silos")
        edges.append((i, j))

    participants_raw = raw.get("participants", [1] * silos)
    if (not isinstance(participants_raw, list) or len(participants_raw) != silos
            or not all(x in (0, 1) for x in participants_raw)):
        raise _err("participants", f"expected a list of {silos} 0/1 flags")
    if sum(participants_raw) < 1:
        raise _err("participants", "at least one silo must participate")

    rounds = _get(raw, "rounds", "", int, 10)
    if rounds < 1:
        raise _err("rounds", f"must be >= 1, got {rounds}")
    eval_every = _get(raw, "eval_every", "", int, 1)
    if eval_every < 1:
        raise _err("eval_every", f"must be >= 1, got {eval_every}")

    cfg = ExperimentConfig(
        seed=_get(raw, "seed", "", int, 0),
        silos=silos,
        topology=topology,
        edges=tuple(edges),
        rounds=rounds,
        eval_every=eval_every,
        participants=tuple(participants_raw),
        model=_parse_model(raw.get("model", {})),
        data=_parse_data(raw.get("data", {}), base_dir),
        distill=_parse_distill(raw.get("distill", {})),
        emd=_parse_emd(raw.get("emd", {})),
        federation=_parse_federation(raw.get("federation", {})),
    )
    try:
        arch = cfg.arch()
    except ConfigError as exc:
        raise ConfigError(f"config model/data sections: {exc}") from exc
    if arch.n_patches > FEATURE_CELL_CAP:
        raise _err(
            "model.patch_size",
            f"feature map has {arch.n_patches} cells; cap is {FEATURE_CELL_CAP}",
        )
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML config (or a JSON config echo)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    if path.suffix == ".json":
        raw = json.loads(text.decode("utf-8"))
    else:
        try:
            raw = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)
