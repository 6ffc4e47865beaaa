"""Experiment configuration: profile defaults, config-file keys, and CLI
overrides, resolved in that order. Keys are flat and documented here.

desk profile: sizes chosen so every algorithm finishes in minutes on one
CPU core. paper profile: the published-scale constants (100 networks per
generation trained 3000 iterations, 120 meta-iterations of 250, module
populations 50/4 species, 25/2 for cmtr, 20 blueprints, top-50 retraining
for 30000 iterations).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import ConfigError, ParseError

ALGORITHMS = ("baseline-single", "baseline-soft", "cm", "cmsr", "ctr", "cmtr")

PROFILES = {
    "desk": dict(
        networks_per_generation=16, train_iters=600, n_top=5,
        modules=12, species=4, cmtr_modules=8, cmtr_species=2,
        blueprints=6, stagnation_limit=10, max_generations=3,
        meta_iters=3, m_iters=50, retrain_meta_iters=6,
        long_iters=1200, hyper_pool=4, k_modules=2, depth=2, lr=1e-2,
        synth_tasks=3, synth_classes=3, synth_side=12, synth_noise=0.1,
    ),
    "paper": dict(
        networks_per_generation=100, train_iters=3000, n_top=50,
        modules=50, species=4, cmtr_modules=25, cmtr_species=2,
        blueprints=20, stagnation_limit=10, max_generations=None,
        meta_iters=120, m_iters=250, retrain_meta_iters=120,
        long_iters=30000, hyper_pool=8, k_modules=4, depth=3,
        synth_tasks=20, synth_classes=5, synth_side=28, synth_noise=0.1,
    ),
}


@dataclass
class ExperimentConfig:
    algorithm: str = "ctr"
    profile: str = "desk"
    seed: int = 0
    out: str | None = None

    # dataset: either a directory of PGM tasks or synthesis parameters
    data_dir: str | None = None
    image_side: int = 28
    order_seed: int = 0
    synth_tasks: int = 3
    synth_classes: int = 3
    synth_side: int = 8
    synth_noise: float = 0.1
    synth_seed: int | None = None
    examples_per_class: int = 30

    # evolution driver
    networks_per_generation: int = 16
    train_iters: int = 600
    stagnation_limit: int = 10
    max_generations: int | None = 3
    n_top: int = 5
    long_iters: int = 1200
    modules: int = 12
    species: int = 4
    cmtr_modules: int = 8
    cmtr_species: int = 2
    blueprints: int = 6
    hyper_pool: int = 4
    elite_frac: float = 0.2

    # routing evolution / baseline network knobs
    meta_iters: int = 3
    m_iters: int = 50
    retrain_meta_iters: int = 6
    alpha: float = 0.1
    k_modules: int = 4
    depth: int = 2
    filters: int = 8
    lr: float = 3e-3
    sharing_mode: str = "evolved"
    eval_subsample: int | None = None

    # execution
    serve: str | None = None
    deadline_s: float = 600.0
    plan_only: bool = False

    def check(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.sharing_mode not in ("enabled", "disabled", "evolved"):
            raise ConfigError(f"unknown sharing mode {self.sharing_mode!r}")
        if self.data_dir is None and self.synth_tasks < 1:
            raise ConfigError("need a data directory or synth parameters")

    def dataset_ref(self) -> dict:
        if self.data_dir is not None:
            return {"dir": self.data_dir, "image_side": self.image_side,
                    "order_seed": self.order_seed, "split_seed": self.seed}
        return {"synth": {"seed": self.synth_seed
                          if self.synth_seed is not None else self.seed,
                          "n_tasks": self.synth_tasks,
                          "n_classes": self.synth_classes,
                          "image_side": self.synth_side,
                          "noise": self.synth_noise,
                          "examples_per_class": self.examples_per_class},
                "split_seed": self.seed}

    def effective_image_side(self) -> int:
        return self.image_side if self.data_dir is not None else self.synth_side

    def module_counts(self) -> tuple[int, int]:
        if self.algorithm == "cmtr":
            return self.cmtr_modules, self.cmtr_species
        return self.modules, self.species

    def to_obj(self) -> dict:
        return asdict(self)


def resolve_config(profile: str | None = None, config_file: str | None = None,
                   overrides: dict | None = None) -> ExperimentConfig:
    """profile defaults < config-file values < explicit overrides."""
    cfg = ExperimentConfig()
    values = {}
    if config_file:
        try:
            with open(config_file) as f:
                values = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseError(
                f"config file {config_file}: bad JSON at {e.pos}") from e
    # an explicit --profile beats the file's; the file's beats the default
    prof = (profile or (overrides or {}).get("profile")
            or values.get("profile") or cfg.profile)
    merged = dict(PROFILES[prof] if prof in PROFILES else {})
    merged.update(values)
    merged["profile"] = prof
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    known = set(cfg.to_obj())
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, val in merged.items():
        setattr(cfg, key, val)
    cfg.check()
    return cfg
