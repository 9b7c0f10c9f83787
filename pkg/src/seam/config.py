"""Run configuration: strict JSON schema, defaults, canonical hash."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional


class ConfigError(ValueError):
    pass


@dataclass
class BlobsConfig:
    k: int = 4
    d: int = 16
    n_per_class: int = 250
    n_test_per_class: int = 250
    separation: float = 3.0
    noise_sigma: float = 1.0


@dataclass
class DatasetConfig:
    kind: str = "blobs"  # "blobs" | "cifar10"
    path: Optional[str] = None
    train_limit: Optional[int] = None
    proxy_fraction: float = 1.0
    seed: int = 0
    augment: bool = True
    blobs: BlobsConfig = field(default_factory=BlobsConfig)


@dataclass
class SearchConfig:
    bit_candidates_w: Optional[List[int]] = None  # None -> preset default
    bit_candidates_a: Optional[List[int]] = None
    gamma: Optional[float] = None  # None -> balanced value times gamma_mult
    gamma_mult: float = 1.0
    lam: float = 0.1
    margin: float = 0.1
    margin_mode: str = "multiplicative"
    epochs: int = 15
    lr: float = 0.01
    logit_lr: Optional[float] = None  # None -> shared lr
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    alternating: bool = False
    seam: bool = True
    budget_gbitops: Optional[float] = None
    budget_rate: float = 0.1
    fp_init: Optional[str] = None
    calib_percentile: float = 99.9


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 0.04
    weight_decay: float = 2.5e-5
    warmup: int = 5
    momentum: float = 0.9
    batch_size: int = 128


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.1
    weight_decay: float = 5e-4
    warmup: int = 1
    momentum: float = 0.9
    batch_size: int = 128


@dataclass
class TrainConfig:
    model: str = "mlp"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seed: int = 0
    threads: int = 1

    def validate(self):
        s = self.search
        if s.lam < 0 or (s.gamma is not None and s.gamma < 0) or s.gamma_mult < 0 or s.margin < 0:
            raise ConfigError("lambda, gamma, gamma_mult and margin must be non-negative")
        if s.margin_mode not in ("multiplicative", "additive"):
            raise ConfigError(f"unknown margin_mode {s.margin_mode!r}")
        for bits in (s.bit_candidates_w, s.bit_candidates_a):
            if bits is not None:
                if not bits or any(b < 2 for b in bits) or any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
                    raise ConfigError(f"invalid bit candidate list {bits}")
        if self.dataset.kind not in ("blobs", "cifar10"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if not 0 < self.dataset.proxy_fraction <= 1:
            raise ConfigError("proxy_fraction must be in (0, 1]")
        if self.finetune.warmup >= self.finetune.epochs:
            raise ConfigError("finetune warmup must be shorter than finetune epochs")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc, "config").validate()

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def replace(self, **sections):
        """Copy with nested overrides, e.g. ``replace(search={"gamma": 0.1})``."""
        doc = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                doc[k].update(v)
            else:
                doc[k] = v
        return TrainConfig.from_dict(doc)


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if cls is SearchConfig and "lambda" in doc:
        doc = dict(doc)
        doc["lam"] = doc.pop("lambda")
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
