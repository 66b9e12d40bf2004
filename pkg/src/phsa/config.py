"""Run configuration: data, encoder and training settings in one JSON document.

Schema (every key optional; missing keys take defaults)::

    {
      "variant": "M5",                  # variant under study
      "data":    {"n_train": 200, "n_dev": 60, "t_min": 30, "t_max": 60,
                  "d_in": 16, "seed": 1, "noise_scale": 0.3,
                  "speaker_scale": 0.5, "mean_scale": 0.4,
                  "shared_fraction": 0.5, "inventory_seed": 1234},
      "encoder": {"num_layers": 4, "num_heads": 4, "d_model": 64, "d_h": 16,
                  "ffn_dim": 128, "num_phsa_layers": 4,
                  "variant_for_upper": "M2", "use_abs_pe": true,
                  "scale": true, "seed": 0},
      "train":   {"learning_rate": 0.00156, "weight_decay": 0.0001,
                  "batch_size": 16, "epochs": 15, "seed": 0}
    }

Precedence is command-line flags, then the file, then these defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attention import Variant
from .encoder import ConfigError, EncoderConfig
from .task import PhonemeInventory, TrainConfig, generate_dataset


@dataclass
class DataConfig:
    n_train: int = 200
    n_dev: int = 60
    t_min: int = 30
    t_max: int = 60
    d_in: int = 16
    seed: int = 1
    noise_scale: float = 0.3
    speaker_scale: float = 0.5
    mean_scale: float = 0.4
    shared_fraction: float = 0.5
    inventory_seed: int = 1234

    def inventory(self) -> PhonemeInventory:
        return PhonemeInventory(mean_scale=self.mean_scale, shared_fraction=self.shared_fraction,
                                seed=self.inventory_seed)

    def splits(self):
        if self.t_min > self.t_max:
            raise ConfigError(f"t_min ({self.t_min}) exceeds t_max ({self.t_max})")
        inv = self.inventory()
        kw = dict(t_range=(self.t_min, self.t_max), d_in=self.d_in,
                  noise_scale=self.noise_scale, speaker_scale=self.speaker_scale)
        train = generate_dataset(inv, self.n_train, seed=self.seed, **kw)
        dev = generate_dataset(inv, self.n_dev, seed=self.seed + 1_000_003, first_uid=1_000_000, **kw)
        return train, dev


def resolve_encoder(variant: Variant | str, base: EncoderConfig,
                    phsa_layers: int | None = None, upper: Variant | str | None = None) -> EncoderConfig:
    """Turn "variant under study" into a concrete layer layout.

    M5 puts phonetic attention in the lowest ``phsa_layers`` layers (falling
    back to ``base.num_phsa_layers``, then to all layers) and ``upper``
    (default M2) above.  M1-M4 run in every
    layer and accept no phonetic layers.
    """
    variant = Variant(variant)
    if variant is Variant.M5:
        k = phsa_layers if phsa_layers is not None else (base.num_phsa_layers or base.num_layers)
        return replace(base, num_phsa_layers=k, variant_for_upper=Variant(upper or base.variant_for_upper))
    if phsa_layers:
        raise ConfigError(f"--phsa-layers needs variant M5, got {variant.value}")
    return replace(base, num_phsa_layers=0, variant_for_upper=variant)


@dataclass
class RunConfig:
    variant: Variant = Variant.M5
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "variant": Variant(self.variant).value,
            "data": asdict(self.data),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"variant", "data", "encoder", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            variant=Variant(d.get("variant", Variant.M5.value)),
            data=_build(DataConfig, d.get("data", {})),
            encoder=_build(EncoderConfig, d.get("encoder", {})),
            train=_build(TrainConfig, d.get("train", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
