"""Model variant configurations and their INI-style text form."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, replace

from evtlab.attention import AttnMode, DecayMode
from evtlab.decay import DecayKind, DecaySpec

GROUPED = "grouped"
FULL = "full"


@dataclass(frozen=True)
class StageConfig:
    dim: int
    depth: int
    heads: int
    group_size: int
    ffn_ratio: int = 3
    mixer: str = GROUPED

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"stage width {self.dim} is not divisible by {self.heads} heads")
        if self.mixer not in (GROUPED, FULL):
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if min(self.dim, self.depth, self.heads, self.group_size, self.ffn_ratio) < 1:
            raise ValueError("stage fields must be positive")


@dataclass(frozen=True)
class VariantConfig:
    name: str
    stem_channels: tuple
    stages: tuple
    num_classes: int = 1000
    gamma_base: int = 3
    decay: DecayKind = DecayKind.EUCLIDEAN
    minkowski_p: float = 2.0
    rbf_scale: float = 1.0
    attn_mode: AttnMode = field(default_factory=AttnMode)
    head_hidden: int = 0
    cpe_kernel: int = 3
    lce_kernel: int = 5
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "decay", DecayKind.parse(self.decay))
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.stem_channels) != 4:
            raise ValueError("the conv stem has exactly four convolutions")
        if not 1 <= len(self.stages) <= 4:
            raise ValueError(f"between 1 and 4 stages are supported, got {len(self.stages)}")
        if self.stages[-1].mixer != FULL or any(s.mixer != GROUPED for s in self.stages[:-1]):
            raise ValueError("the last stage uses full attention and every earlier stage grouped attention")
        if self.stem_channels[-1] != self.stages[0].dim:
            raise ValueError("the stem must end at the first stage width")

    def decay_spec(self, gamma):
        return DecaySpec(self.decay, gamma, self.minkowski_p, self.rbf_scale)

    def with_decay(self, kind):
        return replace(self, decay=DecayKind.parse(kind))


def _stages(dims, depths, heads, ffn_ratio=3, group_size=98, last_group=49):
    out = []
    for i, (d, n, h) in enumerate(zip(dims, depths, heads)):
        last = i == len(dims) - 1
        out.append(StageConfig(d, n, h, last_group if last else group_size, ffn_ratio, FULL if last else GROUPED))
    return tuple(out)


def _published_variant(name, stem, dims, depths, heads):
    return VariantConfig(name=name, stem_channels=(stem, stem, stem, dims[0]),
                         stages=_stages(dims, depths, heads), head_hidden=1024)


VARIANTS = {
    "evt-t": _published_variant("evt-t", 32, (64, 128, 256, 512), (2, 2, 9, 2), (2, 4, 8, 16)),
    "evt-s": _published_variant("evt-s", 32, (64, 128, 256, 512), (4, 4, 18, 4), (2, 4, 8, 16)),
    "evt-b": _published_variant("evt-b", 40, (80, 160, 320, 512), (4, 8, 26, 9), (2, 4, 8, 16)),
    "evt-l": _published_variant("evt-l", 56, (112, 224, 448, 640), (4, 8, 26, 9), (4, 8, 14, 20)),
    "evt-xl": _published_variant("evt-xl", 64, (128, 256, 512, 1024), (6, 12, 28, 12), (4, 8, 16, 32)),
}

# Desk-scale model for smoke tests and toy training: 32x32 input -> 8x8 then 4x4 tokens.
MICRO = VariantConfig(
    name="micro",
    stem_channels=(4, 4, 4, 8),
    stages=(StageConfig(8, 1, 2, 16, 3, GROUPED), StageConfig(16, 1, 2, 16, 3, FULL)),
    num_classes=4,
)

PUBLISHED_DEFAULTS = {"group_size": 98, "last_group_size": 49, "gamma_base": 3, "ffn_ratio": 3}


def apply_published_defaults(cfg):
    """Reset group sizes, gamma base and FFN ratio to the published architecture constants."""
    last = len(cfg.stages) - 1
    stages = tuple(
        replace(st, ffn_ratio=PUBLISHED_DEFAULTS["ffn_ratio"],
                group_size=PUBLISHED_DEFAULTS["last_group_size"] if i == last else PUBLISHED_DEFAULTS["group_size"])
        for i, st in enumerate(cfg.stages)
    )
    return replace(cfg, stages=stages, gamma_base=PUBLISHED_DEFAULTS["gamma_base"])


def get_variant(name):
    key = name.lower()
    if key == "micro":
        return MICRO
    try:
        return VARIANTS[key]
    except KeyError:
        raise KeyError(f"unknown variant {name!r}; choose from micro, {', '.join(VARIANTS)}") from None


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def config_to_text(cfg, extra=None):
    """Serialise ``cfg`` (plus optional extra sections) as INI text."""
    cp = configparser.ConfigParser()
    cp["model"] = {
        "name": cfg.name,
        "stem_channels": ",".join(str(c) for c in cfg.stem_channels),
        "num_classes": str(cfg.num_classes),
        "gamma_base": str(cfg.gamma_base),
        "decay": cfg.decay.value,
        "minkowski_p": repr(cfg.minkowski_p),
        "rbf_scale": repr(cfg.rbf_scale),
        "attn_mode": cfg.attn_mode.decay.value,
        "scale_by_sqrt_d": str(cfg.attn_mode.scale_by_sqrt_d).lower(),
        "head_hidden": str(cfg.head_hidden),
        "cpe_kernel": str(cfg.cpe_kernel),
        "lce_kernel": str(cfg.lce_kernel),
        "ln_eps": repr(cfg.ln_eps),
    }
    for i, st in enumerate(cfg.stages, start=1):
        cp[f"stage{i}"] = {k: str(v) for k, v in asdict(st).items()}
    for section, values in (extra or {}).items():
        cp[section] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config_text(text):
    """Parse INI text into ``(VariantConfig, {section: {key: str}})`` for the non-model sections."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "model" not in cp:
        raise ValueError("config has no [model] section")
    m = cp["model"]
    base = get_variant(m["variant"]) if "variant" in m else None
    stage_names = sorted((s for s in cp.sections() if s.startswith("stage")), key=lambda s: int(s[5:]))
    if stage_names:
        stages = tuple(
            StageConfig(
                dim=cp.getint(s, "dim"),
                depth=cp.getint(s, "depth"),
                heads=cp.getint(s, "heads"),
                group_size=cp.getint(s, "group_size"),
                ffn_ratio=cp.getint(s, "ffn_ratio", fallback=3),
                mixer=cp.get(s, "mixer", fallback=GROUPED),
            )
            for s in stage_names
        )
    elif base is not None:
        stages = base.stages
    else:
        raise ValueError("config defines no stages")
    stem = m.get("stem_channels")
    stem = tuple(int(c) for c in stem.split(",")) if stem else (base.stem_channels if base else None)
    cfg = VariantConfig(
        name=m.get("name", base.name if base else "custom"),
        stem_channels=stem,
        stages=stages,
        num_classes=m.getint("num_classes", base.num_classes if base else 1000),
        gamma_base=m.getint("gamma_base", 3),
        decay=m.get("decay", "euclidean"),
        minkowski_p=m.getfloat("minkowski_p", 2.0),
        rbf_scale=m.getfloat("rbf_scale", 1.0),
        attn_mode=AttnMode(DecayMode(m.get("attn_mode", "post_softmax")), _bool(m.get("scale_by_sqrt_d", "true"))),
        head_hidden=m.getint("head_hidden", base.head_hidden if base else 0),
        cpe_kernel=m.getint("cpe_kernel", 3),
        lce_kernel=m.getint("lce_kernel", 5),
        ln_eps=m.getfloat("ln_eps", 1e-6),
    )
    extra = {s: dict(cp[s]) for s in cp.sections() if s != "model" and not s.startswith("stage")}
    return cfg, extra


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
