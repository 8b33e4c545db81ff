"""Per-node feature vectors built from cell geometry, text and font metadata.

Features are emitted raw; all normalization happens inside the network.
"""

from __future__ import annotations

import math
import re
import unicodedata
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .doc_model import Page
from .errors import VersionError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FONT_BUCKETS = 8
MAX_ASPECT = 20.0

_BULLETS = set("•◦▪▫●○■□►▶➢➤‣⁃-–—*·")
_ENUM_RE = re.compile(r"^(\(?\d{1,3}[.)]|\(?[a-zA-Z][.)]|\(?[ivxIVX]{1,4}[.)])(\s|$)")


@dataclass(frozen=True)
class FeatureSchema:
    version: int
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)


SCHEMA_V1 = FeatureSchema(
    version=1,
    names=(
        # geometry
        "x0", "y0", "x1", "y1", "width", "height", "area", "aspect", "cx", "cy",
        # text
        "log_chars", "log_words", "frac_digits", "frac_upper", "frac_punct",
        "frac_space", "ends_period", "starts_bullet", "all_caps", "title_case",
        # font
        "font_size", "font_size_z", "bold", "italic", "monospace",
    ) + tuple(f"font_hash_{i}" for i in range(FONT_BUCKETS)),
)

SCHEMAS = {1: SCHEMA_V1}


def get_schema(version: int = 1) -> FeatureSchema:
    try:
        return SCHEMAS[version]
    except KeyError:
        raise VersionError(f"unknown feature schema version {version}") from None


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def font_bucket(font_name: str) -> int:
    return fnv1a_64(font_name.lower().encode("utf-8")) % FONT_BUCKETS


def text_features(text: str) -> list:
    n = len(text)
    words = len(text.split())
    if n:
        digits = sum(ch.isdigit() for ch in text) / n
        upper = sum(ch.isupper() for ch in text) / n
        punct = sum(unicodedata.category(ch).startswith("P") for ch in text) / n
        space = sum(ch.isspace() for ch in text) / n
    else:
        digits = upper = punct = space = 0.0
    letters = [ch for ch in text if ch.isalpha()]
    all_caps = bool(letters) and all(ch.isupper() for ch in letters)
    starts_bullet = bool(text) and (text[0] in _BULLETS or bool(_ENUM_RE.match(text)))
    return [
        math.log1p(n),
        math.log1p(words),
        digits,
        upper,
        punct,
        space,
        float(text.rstrip().endswith(".")),
        float(starts_bullet),
        float(all_caps),
        float(text.istitle()),
    ]


def node_features(page: Page, schema: FeatureSchema = SCHEMA_V1) -> np.ndarray:
    """Raw feature matrix ``[N, F]`` (float32), one row per cell in page order."""
    if schema.version not in SCHEMAS or SCHEMAS[schema.version] != schema:
        raise VersionError(f"unsupported feature schema version {schema.version}")
    n = len(page.cells)
    out = np.zeros((n, schema.size), dtype=np.float64)
    if n == 0:
        return out.astype(np.float32)
    W, H = page.width, page.height
    # fsum keeps page statistics independent of cell order
    sizes = [c.font_size for c in page.cells]
    mu = math.fsum(sizes) / n
    sd = math.sqrt(math.fsum((s - mu) ** 2 for s in sizes) / n)
    for i, c in enumerate(page.cells):
        b = c.bbox
        w, h = b.width, b.height
        cx, cy = b.center
        geom = [
            b.x0 / W, b.y0 / H, b.x1 / W, b.y1 / H,
            w / W, h / H, (w * h) / (W * H),
            min(max(w / h, 0.0), MAX_ASPECT),
            cx / W, cy / H,
        ]
        name = c.font_name.lower()
        hashed = [0.0] * FONT_BUCKETS
        hashed[font_bucket(c.font_name)] = 1.0
        font = [
            c.font_size / H,
            (c.font_size - mu) / sd if sd > 0 else 0.0,
            float("bold" in name),
            float("italic" in name or "oblique" in name),
            float("mono" in name or "courier" in name),
        ] + hashed
        out[i] = geom + text_features(c.text) + font
    return out.astype(np.float32)
