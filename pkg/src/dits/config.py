"""Flat run configuration covering every tunable of the pipeline.

Defaults are desk-scale; the original-scale values (K=200 diffusion steps,
H-C=100, 1e6 training steps, full-width denoiser) remain reachable by
overriding fields. The on-disk format is plain key=value text.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class DitsConfig:
    # environment / data
    env: str = "bridge2d"
    tier: str = "medium"
    n_offline: int = 200
    gamma: float = 0.99
    normalize_rewards: bool = True
    holdout_frac: float = 0.1
    seed: int = 0
    # window layout (full scale: H - C = 100, C in {1, 20})
    horizon: int = 16
    context: int = 4
    # diffuser (full scale: K = 200, 6 blocks, 128-d embeddings)
    diffusion_steps: int = 64
    schedule: str = "cosine"
    width: int = 64
    n_blocks: int = 3
    emb_dim: int = 64
    kernel: int = 5
    p_drop: float = 0.25
    lr_diffuser: float = 2e-4
    batch_diffuser: int = 32
    steps_diffuser: int = 20_000
    # inverse dynamics
    hidden_idm: tuple = (512, 512)
    lr_idm: float = 2e-4
    batch_idm: int = 32
    steps_idm: int = 20_000
    # dynamics ensemble
    hidden_dynamics: tuple = (300, 300, 300)
    n_members: int = 7
    n_select: int = 3
    lr_dynamics: float = 3e-4
    batch_dynamics: int = 256
    steps_dynamics: int = 20_000
    logvar_min: float = -10.0
    logvar_max: float = 4.0
    # twin value function
    hidden_value: tuple = (256, 256)
    lr_value: float = 3e-4
    batch_value: int = 256
    steps_value: int = 20_000
    # guidance / sampling (omega_impute guides reward imputation separately;
    # 0 keeps imputed rewards unbiased by the return condition)
    omega: float = 1.4
    omega_impute: float = 0.0
    alpha_temp: float = 0.5
    alpha_temp_impute: float = 0.0
    target_y: float = 0.9
    # stitching
    stitch_epochs: int = 2
    n_per_epoch: int = 300
    rho: float = 0.1
    p_tilde: float = 0.1
    kappa_frac: float = 0.5
    # behavioral cloning
    hidden_bc: tuple = (256, 256)
    lr_bc: float = 3e-4
    batch_bc: int = 256
    steps_bc: int = 20_000
    # evaluation protocol
    eval_episodes: int = 10
    eval_seeds: int = 5

    def asdict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "DitsConfig":
        data = self.asdict()
        data.update(overrides)
        return DitsConfig(**data)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for key, value in self.asdict().items():
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                fh.write(f"{key}={value}\n")

    @classmethod
    def from_file(cls, path) -> "DitsConfig":
        raw = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"malformed config line {line!r}")
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            kwargs[f.name] = _parse(raw.pop(f.name), f.type, f.default)
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def _parse(text: str, type_name, default):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text
