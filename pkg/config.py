"""
Configuration for the emotion editing pipeline.

One TOML file with [kg], [cues], [era], [dsee], [clients] and [run] sections.
The path comes from --config, else the EMOKG_CONFIG environment variable,
else built-in defaults are used. CLI flags override file values.
"""

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from services.errors import ConfigError
from services.kg_service import DEFAULT_DIM, MIKELS_EMOTIONS

CONFIG_ENV = "EMOKG_CONFIG"
# pipeline variants: the full method, one stage removed, or stages added to plain sampling
ABLATIONS = ("full", "no_era", "no_kg", "era", "base")
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))


@dataclass(frozen=True)
class KgSettings:
    graph_path: str = "data/toy_graph.jsonl"
    emotion_labels: Tuple[str, ...] = MIKELS_EMOTIONS
    dim: int = DEFAULT_DIM
    k: int = 5


@dataclass(frozen=True)
class CueSettings:
    lam: float = 0.5
    K: int = 15
    tau: float = 0.6
    mode: str = "template"
    conflict_rules: Optional[str] = None
    lexicon: Optional[str] = None


@dataclass(frozen=True)
class EraSettings:
    num_layers: int = 3
    threshold: float = 0.5
    decoder_path: Optional[str] = None
    patch: int = 8
    backbone_dim: int = 32
    backbone_depth: int = 4


@dataclass(frozen=True)
class DseeSettings:
    steps: int = 50
    guidance_scale: float = 7.5
    lambda_att: float = 0.5
    harmonize_steps: int = 5
    backend: str = "gaussian"
    latent_scale: int = 4
    soft_mask: bool = False
    prior_std: float = 1.0


@dataclass(frozen=True)
class ClientSettings:
    lmm_endpoint: Optional[str] = None
    lmm_command: Optional[List[str]] = None
    backbone_endpoint: Optional[str] = None
    denoiser_endpoint: Optional[str] = None
    embedding_endpoint: Optional[str] = None
    classifier_endpoint: Optional[str] = None
    score_endpoint: Optional[str] = None
    intensity_endpoint: Optional[str] = None
    timeout: float = 60.0


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    output_dir: str = "runs"
    workers: int = 1
    run_name: Optional[str] = None
    ablation: str = "full"


SECTIONS = {
    "kg": KgSettings,
    "cues": CueSettings,
    "era": EraSettings,
    "dsee": DseeSettings,
    "clients": ClientSettings,
    "run": RunSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    kg: KgSettings = field(default_factory=KgSettings)
    cues: CueSettings = field(default_factory=CueSettings)
    era: EraSettings = field(default_factory=EraSettings)
    dsee: DseeSettings = field(default_factory=DseeSettings)
    clients: ClientSettings = field(default_factory=ClientSettings)
    run: RunSettings = field(default_factory=RunSettings)
    base_dir: str = PROJECT_ROOT

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = PROJECT_ROOT) -> "PipelineConfig":
        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = dict(data.get(name, {}))
            known = {f.name for f in fields(section_cls)}
            unknown = sorted(set(raw) - known)
            if unknown:
                raise ConfigError(f"Unknown keys in [{name}]: {', '.join(unknown)}")
            if "emotion_labels" in raw:
                raw["emotion_labels"] = tuple(raw["emotion_labels"])
            sections[name] = section_cls(**raw)
        unknown_sections = sorted(set(data) - set(SECTIONS))
        if unknown_sections:
            raise ConfigError(f"Unknown config sections: {', '.join(unknown_sections)}")
        return cls(base_dir=base_dir, **sections)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """
        Apply "section.key" overrides; None values are ignored so unset CLI
        flags keep the file value.

        Example:
            config.with_overrides(**{"cues.tau": 0.7, "dsee.steps": 20})
        """
        updates: Dict[str, Dict[str, Any]] = {}
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in SECTIONS or key not in {f.name for f in fields(SECTIONS[section])}:
                raise ConfigError(f"Unknown config key '{dotted}'.")
            updates.setdefault(section, {})[key] = value
        changed = {name: replace(getattr(self, name), **values) for name, values in updates.items()}
        return replace(self, **changed)

    def resolve(self, path: Optional[str]) -> Optional[str]:
        """Resolve a configured path against the config file's directory."""
        if path is None or os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)

    @property
    def graph_path(self) -> str:
        return self.resolve(self.kg.graph_path)

    def validate(self, require_graph: bool = True) -> "PipelineConfig":
        """Check referenced files and numeric ranges before any stage runs."""
        problems = []
        if require_graph and not os.path.exists(self.graph_path):
            problems.append(f"graph file not found: {self.graph_path}")
        for label, path in (("conflict rules", self.cues.conflict_rules), ("cue lexicon", self.cues.lexicon),
                            ("decoder", self.era.decoder_path)):
            if path is not None and not os.path.exists(self.resolve(path)):
                problems.append(f"{label} file not found: {self.resolve(path)}")
        if not self.kg.emotion_labels:
            problems.append("emotion_labels must not be empty")
        if self.kg.k < 1:
            problems.append("kg.k must be >= 1")
        if not 0.0 <= self.cues.lam <= 1.0:
            problems.append("cues.lam must lie in [0, 1]")
        if self.cues.K < 1:
            problems.append("cues.K must be >= 1")
        if not 0.0 <= self.cues.tau <= 1.0:
            problems.append("cues.tau must lie in [0, 1]")
        if self.cues.mode not in ("template", "lmm_client"):
            problems.append("cues.mode must be 'template' or 'lmm_client'")
        if not 0.0 < self.era.threshold < 1.0:
            problems.append("era.threshold must lie in (0, 1)")
        if not 1 <= self.era.num_layers <= self.era.backbone_depth:
            problems.append("era.num_layers must lie in [1, era.backbone_depth]")
        if self.dsee.steps < 0:
            problems.append("dsee.steps must be >= 0")
        if self.dsee.guidance_scale < 0 or self.dsee.lambda_att < 0:
            problems.append("dsee.guidance_scale and dsee.lambda_att must be >= 0")
        if self.dsee.harmonize_steps < 0 or (self.dsee.steps and self.dsee.harmonize_steps >= self.dsee.steps):
            problems.append("dsee.harmonize_steps must lie in [0, dsee.steps)")
        if self.dsee.backend not in ("zero", "gaussian", "client"):
            problems.append("dsee.backend must be 'zero', 'gaussian' or 'client'")
        if self.dsee.backend == "client" and not self.clients.denoiser_endpoint:
            problems.append("dsee.backend 'client' needs clients.denoiser_endpoint")
        if self.dsee.latent_scale < 1:
            problems.append("dsee.latent_scale must be >= 1")
        if self.run.workers < 1:
            problems.append("run.workers must be >= 1")
        if self.run.ablation not in ABLATIONS:
            problems.append(f"run.ablation must be one of {', '.join(ABLATIONS)}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = {name: asdict(getattr(self, name)) for name in SECTIONS}
        data["kg"]["emotion_labels"] = list(self.kg.emotion_labels)
        return data


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Load the config from `path`, else $EMOKG_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from None
    return PipelineConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
