"""Flat ``key = value`` run configuration.

Keys mirror the fields of :class:`PipelineConfig`; CRF, boundary-fit and
Gaussian settings use ``crf_``, ``fit_`` and ``gauss_`` prefixes::

    # comment
    gamma = 5
    crf_n_iters = 0
    fit_steps = 300
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Optional

from .affinity import BoundaryFitConfig
from .attention import GaussianParams
from .core import CrfParams, PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    fit: BoundaryFitConfig = field(default_factory=BoundaryFitConfig)
    gauss: GaussianParams = field(default_factory=GaussianParams)
    use_cam: bool = True

    def flat(self) -> dict:
        out = {}
        for k, v in asdict(self.pipeline).items():
            if k == "crf":
                out.update({f"crf_{ck}": cv for ck, cv in v.items()})
            else:
                out[k] = v
        out.update({f"fit_{k}": v for k, v in asdict(self.fit).items()})
        out.update({f"gauss_{k}": v for k, v in asdict(self.gauss).items()})
        out["use_cam"] = self.use_cam
        return dict(sorted(out.items()))


def _coerce(raw: str, like):
    s = raw.strip()
    if isinstance(like, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if s.lower() in ("none", "null", ""):
        return None
    if isinstance(like, int):
        return int(s)
    return float(s)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(values: Mapping[str, object]) -> RunConfig:
    """Build a RunConfig from flat key/value pairs (strings or already typed)."""
    base = RunConfig()
    defaults = base.flat()
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(defaults)
    for k, v in values.items():
        like = defaults[k]
        if like is None and k == "fit_max_pairs":
            like = 0
        try:
            merged[k] = _coerce(v, like) if isinstance(v, str) else v
        except ValueError as e:
            raise ConfigError(f"{k}: {e}") from e

    def pick(prefix: str, cls):
        names = {f.name for f in fields(cls)}
        return {k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix) and k[len(prefix):] in names}

    try:
        crf = CrfParams(**pick("crf_", CrfParams))
        top = {f.name: merged[f.name] for f in fields(PipelineConfig) if f.name != "crf"}
        return RunConfig(
            pipeline=PipelineConfig(crf=crf, **top),
            fit=BoundaryFitConfig(**pick("fit_", BoundaryFitConfig)),
            gauss=GaussianParams(**pick("gauss_", GaussianParams)),
            use_cam=bool(merged["use_cam"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[str], overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, fit=replace(cfg.fit, seed=seed))
