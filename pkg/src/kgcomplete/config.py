"""Pipeline configuration: TOML file, CLI overrides, validation.

The file uses flat key-value sections; every knob has a default so a minimal
config only needs the [data] paths. Overrides arrive as "section.key=value"
strings and are coerced to the target field's type.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .embeddings import MODEL_KINDS, EmbeddingConfig
from .errors import ConfigError
from .gcn import AdapterConfig
from .prompts import ROLE_NAMES

SELECTOR_MODES = ("surrogate", "external", "none")


@dataclass
class DataConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    entity_labels: str = ""
    relation_labels: str = ""


@dataclass
class RuleMiningConfig:
    max_len: int = 3
    min_support: int = 1
    min_confidence: float = 0.0
    samples_per_rel: int = 1000
    seed: int = 0
    subset_mode: str = "multiset"


@dataclass
class RetrievalConfig:
    k: int = 20
    tau: int = 100


@dataclass
class SelectorConfig:
    mode: str = "surrogate"
    url: str = ""
    model_name: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    displace: bool = True


@dataclass
class PromptConfig:
    lexicon: str = ""
    role: str = "general"


@dataclass
class FlagsConfig:
    use_rules: bool = True
    use_local: bool = True
    use_embeddings: bool = True
    use_templates: bool = True


@dataclass
class OutputConfig:
    dir: str = "runs/out"


@dataclass
class EvalConfig:
    split: str = "test"
    inductive: bool = False


_SECTION_TYPES = {
    "data": DataConfig,
    "output": OutputConfig,
    "embeddings": EmbeddingConfig,
    "rules": RuleMiningConfig,
    "retrieval": RetrievalConfig,
    "adapter": AdapterConfig,
    "selector": SelectorConfig,
    "prompts": PromptConfig,
    "flags": FlagsConfig,
    "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    rules: RuleMiningConfig = field(default_factory=RuleMiningConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    flags: FlagsConfig = field(default_factory=FlagsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        # The adapter trains against the same retrieval budget and candidate
        # count the rest of the pipeline uses.
        self.adapter.tau = self.retrieval.tau
        self.adapter.k = self.retrieval.k

    def section_dict(self, *names: str) -> dict:
        return {name: asdict(getattr(self, name)) for name in names}

    def config_hash(self, *names: str) -> str:
        payload = json.dumps(self.section_dict(*names), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        """Collect every violation before raising, so users can fix all at once."""
        problems: list[str] = []
        for name, required in (("train", True), ("valid", False), ("test", False)):
            path = getattr(self.data, name)
            if not path:
                if required:
                    problems.append(f"data.{name} is required")
            elif not Path(path).exists():
                problems.append(f"data.{name}: no such file {path!r}")
        for name in ("entity_labels", "relation_labels"):
            path = getattr(self.data, name)
            if path and not Path(path).exists():
                problems.append(f"data.{name}: no such file {path!r}")
        if self.embeddings.model_kind not in MODEL_KINDS:
            problems.append(
                f"embeddings.model_kind must be one of {MODEL_KINDS}, got {self.embeddings.model_kind!r}"
            )
        if self.embeddings.dim <= 0:
            problems.append(f"embeddings.dim must be positive, got {self.embeddings.dim}")
        if self.retrieval.k < 1:
            problems.append(f"retrieval.k must be >= 1, got {self.retrieval.k}")
        if self.retrieval.tau < 1:
            problems.append(f"retrieval.tau must be >= 1, got {self.retrieval.tau}")
        if self.rules.max_len < 1:
            problems.append(f"rules.max_len must be >= 1, got {self.rules.max_len}")
        if self.adapter.layers not in (1, 2):
            problems.append(f"adapter.layers must be 1 or 2, got {self.adapter.layers}")
        if self.adapter.d_gcn < 1 or self.adapter.d_out < 1:
            problems.append("adapter.d_gcn and adapter.d_out must be >= 1")
        if self.selector.mode not in SELECTOR_MODES:
            problems.append(
                f"selector.mode must be one of {SELECTOR_MODES}, got {self.selector.mode!r}"
            )
        if self.selector.mode == "external":
            if not self.selector.url:
                problems.append("selector.url is required in external mode")
            if not self.selector.model_name:
                problems.append("selector.model_name is required in external mode")
        if self.prompts.role not in ROLE_NAMES:
            problems.append(
                f"prompts.role must be one of {sorted(ROLE_NAMES)}, got {self.prompts.role!r}"
            )
        if self.prompts.lexicon and not Path(self.prompts.lexicon).exists():
            problems.append(f"prompts.lexicon: no such file {self.prompts.lexicon!r}")
        if self.eval.split not in ("valid", "test"):
            problems.append(f"eval.split must be 'valid' or 'test', got {self.eval.split!r}")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def _coerce(raw: str, target_type: type) -> object:
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _apply_section(obj, section: str, values: dict, problems: list[str]) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in values.items():
        if key not in known:
            problems.append(f"unknown key {section}.{key}")
            continue
        setattr(obj, key, value)


def load_config(path: str | Path, overrides: list[str] | None = None) -> PipelineConfig:
    """Parse the TOML config and apply "section.key=value" overrides."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    config = PipelineConfig()
    problems: list[str] = []
    for section, values in raw.items():
        if section not in _SECTION_TYPES:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(values, dict):
            problems.append(f"section [{section}] must be a table")
            continue
        _apply_section(getattr(config, section), section, values, problems)
    for override in overrides or ():
        if "=" not in override or "." not in override.split("=", 1)[0]:
            problems.append(f"override must look like section.key=value, got {override!r}")
            continue
        target, raw_value = override.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTION_TYPES:
            problems.append(f"unknown section in override {override!r}")
            continue
        obj = getattr(config, section)
        known = {f.name: f for f in fields(obj)}
        if key not in known:
            problems.append(f"unknown key in override {override!r}")
            continue
        try:
            setattr(obj, key, _coerce(raw_value, type(getattr(obj, key))))
        except (ValueError, ConfigError) as exc:
            problems.append(f"bad override {override!r}: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    config.__post_init__()
    return config
