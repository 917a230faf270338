"""Declarative network description, named presets and the text config format.

Config files are UTF-8 ``key = value`` lines grouped in sections::

    [stem]
    channels = 64
    [stage1]
    layers = 6
    growth = 32
    bottleneck = 32
    transition = 128
    pool = true
    ...
    [head]
    keypoints = 17
    input_height = 256
    input_width = 192
    [variant]
    mau = mask
    cau = oab
    fusion = sfu

``#`` starts a comment. Unknown sections or keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Tuple, Union

from .blocks import BlockVariantConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class StageConfig:
    layers: int
    transition: int
    growth: int = 32
    bottleneck: int = 32
    pool: bool = True


@dataclass(frozen=True)
class DANetConfig:
    name: str
    stages: Tuple[StageConfig, ...]
    stem_channels: int = 64
    keypoints: int = 17
    input_size: Tuple[int, int] = (256, 192)
    variant: BlockVariantConfig = field(default_factory=BlockVariantConfig)
    cau_reduction: int = 16
    sfu_reduction: int = 4

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        for i, s in enumerate(self.stages, 1):
            if s.layers < 0 or s.transition < 1 or s.growth < 1 or s.bottleneck < 1:
                raise ConfigError(f"stage{i}: layers/transition/growth/bottleneck out of range: {s}")
        if any(s.pool for s in self.stages[3:]) or not all(s.pool for s in self.stages[:3]):
            raise ConfigError("stages 1-3 must pool and stage 4 must not (single pyramid, 1/4..1/32)")
        if self.stem_channels < 1 or self.keypoints < 1:
            raise ConfigError("stem_channels and keypoints must be positive")
        h, w = self.input_size
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ConfigError(f"input size {h}x{w} must be a positive multiple of 4")

    def stage_widths(self) -> Tuple[Tuple[int, int, int], ...]:
        """(input channels, pre-transition channels, transition channels) per stage."""
        out = []
        c = self.stem_channels
        for s in self.stages:
            pre = c + s.layers * s.growth
            out.append((c, pre, s.transition))
            c = s.transition
        return tuple(out)

    def lateral_widths(self) -> Tuple[int, ...]:
        return tuple(s.transition for s in self.stages)

    def lateral_sizes(self, input_size=None) -> Tuple[Tuple[int, int], ...]:
        h, w = input_size or self.input_size
        h, w = -(-h // 4), -(-w // 4)
        sizes = []
        for s in self.stages:
            sizes.append((h, w))
            if s.pool:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return tuple(sizes)


_TABLE1 = {
    # name: (layers per stage, transition widths)
    "danet72": ((3, 6, 12, 12), (96, 192, 384, 512)),
    "danet88": ((4, 5, 18, 14), (128, 192, 512, 640)),
    "danet98": ((4, 12, 16, 14), (128, 256, 512, 640)),
    "danet102": ((6, 12, 16, 14), (128, 256, 512, 640)),
}

# ablations of danet102, named by the components that stay on
_ABLATIONS = {
    "baseline1": BlockVariantConfig(mau="off", cau="off", fusion="sum"),
    "baseline2": BlockVariantConfig(mau="off", cau="off", fusion="sum"),
    "cau_only": BlockVariantConfig(mau="off", cau="oab", fusion="sum"),
    "mau_only": BlockVariantConfig(mau="mask", cau="off", fusion="sum"),
    "sfu_only": BlockVariantConfig(mau="off", cau="off", fusion="sfu"),
    "cau_mau": BlockVariantConfig(mau="mask", cau="oab", fusion="sum"),
}

PRESETS = tuple(_TABLE1) + tuple(_ABLATIONS) + ("tiny",)


def _stages(layers, transitions, growth=32, bottleneck=32):
    return tuple(
        StageConfig(layers=l, transition=t, growth=growth, bottleneck=bottleneck, pool=i < 3)
        for i, (l, t) in enumerate(zip(layers, transitions))
    )


def preset(name: str, keypoints: int = 17, **overrides) -> DANetConfig:
    """Build a named configuration; ``overrides`` replace top-level fields."""
    if name in _TABLE1:
        layers, trans = _TABLE1[name]
        cfg = DANetConfig(name=name, stages=_stages(layers, trans), keypoints=keypoints)
    elif name in _ABLATIONS:
        layers, trans = _TABLE1["danet102"]
        growth = 64 if name == "baseline2" else 32
        cfg = DANetConfig(name=name, stages=_stages(layers, trans, growth=growth), keypoints=keypoints,
                          variant=_ABLATIONS[name])
    elif name == "tiny":
        # desk-scale model for gradient checks and toy training
        # the 1/4-resolution lateral is kept wide: the head is a single 1x1 map from it to K channels
        cfg = DANetConfig(name="tiny", stages=_stages((1, 1, 1, 1), (48, 48, 48, 64), growth=8, bottleneck=8),
                          stem_channels=16, keypoints=keypoints, input_size=(128, 96), cau_reduction=4)
    else:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_STAGE_KEYS = {"layers": int, "growth": int, "bottleneck": int, "transition": int, "pool": "bool"}
_SECTIONS = {
    "stem": {"channels": int},
    "head": {"keypoints": int, "input_height": int, "input_width": int},
    "variant": {"mau": str, "cau": str, "fusion": str, "cau_reduction": int, "sfu_reduction": int},
    "model": {"name": str},
    **{f"stage{i}": _STAGE_KEYS for i in range(1, 5)},
}


def _convert(raw: str, kind, key: str, line: int):
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}", line)
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}", line) from None
    return raw


def parse_config(text: str) -> DANetConfig:
    values: dict = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw_line.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        allowed = _SECTIONS[section]
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        values[section][key] = _convert(val, allowed[key], key, lineno)

    stages = []
    for i in range(1, 5):
        sec = values.get(f"stage{i}")
        if sec is None:
            raise ConfigError(f"missing section [stage{i}]")
        for req in ("layers", "transition"):
            if req not in sec:
                raise ConfigError(f"[stage{i}] is missing {req!r}")
        stages.append(StageConfig(layers=sec["layers"], transition=sec["transition"],
                                  growth=sec.get("growth", 32), bottleneck=sec.get("bottleneck", 32),
                                  pool=sec.get("pool", i < 4)))
    head = values.get("head", {})
    var = values.get("variant", {})
    try:
        variant = BlockVariantConfig(mau=var.get("mau", "mask"), cau=var.get("cau", "oab"),
                                     fusion=var.get("fusion", "sfu"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return DANetConfig(
        name=values.get("model", {}).get("name", "custom"),
        stages=tuple(stages),
        stem_channels=values.get("stem", {}).get("channels", 64),
        keypoints=head.get("keypoints", 17),
        input_size=(head.get("input_height", 256), head.get("input_width", 192)),
        variant=variant,
        cau_reduction=var.get("cau_reduction", 16),
        sfu_reduction=var.get("sfu_reduction", 4),
    )


def format_config(cfg: DANetConfig) -> str:
    lines = ["[model]", f"name = {cfg.name}", "", "[stem]", f"channels = {cfg.stem_channels}", ""]
    for i, s in enumerate(cfg.stages, 1):
        lines += [f"[stage{i}]"]
        lines += [f"{f.name} = {str(getattr(s, f.name)).lower()}" for f in fields(s)]
        lines.append("")
    h, w = cfg.input_size
    lines += ["[head]", f"keypoints = {cfg.keypoints}", f"input_height = {h}", f"input_width = {w}", ""]
    v = cfg.variant
    lines += ["[variant]", f"mau = {v.mau}", f"cau = {v.cau}", f"fusion = {v.fusion}",
              f"cau_reduction = {cfg.cau_reduction}", f"sfu_reduction = {cfg.sfu_reduction}", ""]
    return "\n".join(lines)


def load_config(path: Union[str, Path]) -> DANetConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
