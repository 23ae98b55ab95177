"""Named experiment bundles: dataset, training recipe, evaluation settings and sweep grid."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .metrics import DstspConfig
from .objective import RegConfig
from .systems import SplitConfig, default_split, get_system, make_dataset
from .trainer import TrainConfig

__all__ = [
    "ExperimentPreset",
    "PRESETS",
    "get_preset",
    "dataset_for",
    "constant_product_grid",
    "SWEEP_SEQ_LENS",
    "PRODUCT_BT",
    "with_deer",
]

PRODUCT_BT = 2 ** 15
SWEEP_SEQ_LENS = (256, 512, 1024, 2048, 4096, 8192, 16384, 32768)


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    system: str
    train: TrainConfig
    dstsp: DstspConfig
    dropped_variables: tuple[int, ...] = ()
    eval_warmup: int = 128  # T_w of the evaluation warm-up
    n_rmse: int = 128
    sweep_seq_lens: tuple[int, ...] = SWEEP_SEQ_LENS
    product_bt: int = PRODUCT_BT
    notes: dict = field(default_factory=dict)

    def split(self) -> SplitConfig:
        spec = get_system(self.system)
        base = default_split(spec)
        if self.dropped_variables:
            base = dataclasses.replace(base, dropped_variables=self.dropped_variables)
        return base


def constant_product_grid(seq_lens, product: int = PRODUCT_BT):
    """``(B, T)`` pairs with ``B * T == product``; every ``T`` must divide it."""
    out = []
    for t in seq_lens:
        if t < 1 or product % t:
            raise ValueError(f"seq_len {t} does not divide B*T = {product}")
        out.append((product // t, int(t)))
    return out


_L63 = dict(model="shplrnn", latent_dim=5, hidden_dim=50, alpha=0.15, updates=20_000,
            batch_size=4, seq_len=1024, warmup_len=None, lr_start=1e-3, lr_end=1e-5, m_reg=0)

PRESETS = {
    "lorenz63_fo": ExperimentPreset(
        name="lorenz63_fo", system="lorenz63",
        train=TrainConfig(mode="gtf_deer", **_L63),
        dstsp=DstspConfig(),
    ),
    "lorenz63_po": ExperimentPreset(
        name="lorenz63_po", system="lorenz63", dropped_variables=(1, 2),
        train=TrainConfig(mode="gtf_deer", **_L63),
        dstsp=DstspConfig(embed_m=3, embed_tau=10),
    ),
    "lorenz96_forced": ExperimentPreset(
        name="lorenz96_forced", system="forced_lorenz96",
        train=TrainConfig(mode="gtf_deer", model="shplrnn", latent_dim=10, hidden_dim=128, m_reg=4,
                          alpha=0.08, batch_size=1, seq_len=32768, warmup_len=None,
                          updates=150_000, lr_start=5e-5, lr_end=1e-6,
                          reg=RegConfig(lambda_mar=1.0, lambda_1=1.0, lambda_2=1e-4)),
        dstsp=DstspConfig(embed_m=3, embed_tau=4096),
        eval_warmup=512,
    ),
    "bursting_neuron": ExperimentPreset(
        name="bursting_neuron", system="bursting_neuron", dropped_variables=(2,),
        train=TrainConfig(mode="gtf_deer", model="shplrnn", latent_dim=6, hidden_dim=128, m_reg=0,
                          alpha=0.4, batch_size=1, seq_len=32768, warmup_len=None,
                          updates=150_000, lr_start=5e-5, lr_end=1e-6),
        dstsp=DstspConfig(embed_m=7, embed_tau=1024),
        eval_warmup=512,
    ),
}


def get_preset(name: str) -> ExperimentPreset:
    key = name.lower().replace("-", "_")
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


def dataset_for(name: str, seed: int):
    """``(spec, train, test)`` for a system name or a preset name (presets may drop variables)."""
    key = name.lower().replace("-", "_")
    if key in PRESETS:
        p = PRESETS[key]
        spec = get_system(p.system)
        return (spec,) + make_dataset(spec, seed, p.split())
    spec = get_system(name)
    return (spec,) + make_dataset(spec, seed)


def with_deer(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, deer=dataclasses.replace(cfg.deer, **changes))

