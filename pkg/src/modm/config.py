"""Experiment configuration: one JSON document, flag overrides, content hash."""

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

from .errors import ValidationError


@dataclass
class ExperimentConfig:
    """Bandlimits, grid, distribution, simulation and solver settings for one
    experiment.  Command-line flags override file fields; the hash of the
    resolved document is embedded in every output for reproducibility."""

    bandlimit: int = 2
    dist_degree: int = 4
    n_radial: int = None
    n_angular: int = None
    r_max: float = 0.5
    volume_seed: int = 1
    dist_seed: int = 2
    concentration: float = 2.0
    dist_file: str = None
    n_images: int = 10000
    sigma: float = 0.0
    image_seed: int = 3
    analytic: bool = False
    save_images: bool = False
    max_iter: int = 500
    tol: float = 1e-10
    restarts: int = 5
    solver_seed: int = 0
    svd_cutoff: float = 1e-10
    stop_resid: float = 1e-10
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_radial is None:
            self.n_radial = (self.bandlimit + 1) ** 2
        if self.n_angular is None:
            self.n_angular = 4 * self.bandlimit + 4

    def validate(self):
        if self.bandlimit < 0:
            raise ValidationError("bandlimit must be nonnegative")
        if self.dist_degree % 2:
            raise ValidationError("distribution bandlimit must be even")
        if self.n_radial < (self.bandlimit + 1) ** 2:
            raise ValidationError(
                f"n_radial {self.n_radial} below ({self.bandlimit}+1)^2; solver needs a "
                "full-column-rank factor matrix"
            )
        if self.n_angular < 4 * self.bandlimit + 2:
            raise ValidationError(
                f"n_angular {self.n_angular} below 4*bandlimit+2; angular quadrature degrades"
            )
        if self.dist_degree < 2 * self.bandlimit:
            warnings.warn(
                "distribution bandlimit below twice the volume bandlimit; identifiability "
                "of the top degrees is not guaranteed"
            )
        return self

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, overrides)

    @classmethod
    def from_dict(cls, doc, overrides=None):
        known = {f for f in cls.__dataclass_fields__ if f != "extras"}
        kwargs = {k: v for k, v in doc.items() if k in known}
        extras = {k: v for k, v in doc.items() if k not in known}
        cfg = cls(**kwargs, extras=extras)
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in known:
                raise ValidationError(f"unknown config override {key!r}")
            setattr(cfg, key, value)
        return cfg

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
