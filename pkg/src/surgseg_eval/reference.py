"""Published scores used as reference columns in reports (values in percent)."""

from __future__ import annotations

import csv
import hashlib
import io
from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from types import MappingProxyType

REFERENCE_FILE = "reference_scores.csv"
REFERENCE_SHA256 = "fd363d52b64af2794d1baa06392cda876e2c6229482309ff557d28ac25810f74"
DATASETS = ("EndoVis2017", "EndoVis2018", "EndoNeRF", "DSAD", "Endoscapes2023", "CholecSeg8k")

_PUBLISHED_PROMPT_NAMES = {"1Point-Center": "1Point-Center", "1Point-Random": "1Point", "3Points-Random": "3Points-Random",
                       "Bbox": "Bbox", "Mask": "Mask"}
_FT_PROMPT_NAMES = {"point": "1Point", "box": "Bbox", "mask": "Mask"}


class ReferenceIntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReferenceTable:
    """(section, dataset, method) -> {metric: value}; read-only."""

    scores: Mapping[tuple[str, str, str], Mapping[str, float]]

    def lookup(self, dataset: str, method: str, section: str | None = None) -> dict[str, float]:
        for (sec, ds, m), vals in self.scores.items():
            if ds == dataset and m == method and (section is None or sec == section):
                return dict(vals)
        return {}

    def methods(self, dataset: str | None = None) -> list[str]:
        return sorted({m for (_, ds, m) in self.scores if dataset is None or ds == dataset})


def load_reference_table(text: str | None = None, expected_sha256: str = REFERENCE_SHA256) -> ReferenceTable:
    if text is None:
        text = resources.files("surgseg_eval").joinpath("data", REFERENCE_FILE).read_text()
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    if digest != expected_sha256:
        raise ReferenceIntegrityError(f"reference transcription checksum mismatch: {digest}")
    scores: dict[tuple[str, str, str], dict[str, float]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        scores.setdefault((row["section"], row["dataset"], row["method"]), {})[row["metric"]] = float(row["value"])
    frozen = {k: MappingProxyType(v) for k, v in scores.items()}
    return ReferenceTable(MappingProxyType(frozen))


def vanilla_row_name(strategy: str, reinit_interval: int | None) -> str | None:
    """Method label used for zero-shot runs, e.g. ``SAM2-Mask-Reinit 30``."""
    base = _PUBLISHED_PROMPT_NAMES.get(strategy)
    if base is None:
        return None
    if reinit_interval is None:
        return f"SAM2-{base}"
    if strategy == "1Point-Random":
        base = "1Point-Random"
    return f"SAM2-{base}-Reinit {reinit_interval}"


def finetuned_row_name(prompt_type: str, variant: str, regime: str = "image_dense") -> tuple[str, str] | None:
    """(section, method) for a finetuned variant."""
    if regime == "image_dense":
        name = _FT_PROMPT_NAMES.get(prompt_type)
        return ("finetuned_image_dense", f"SAM2-FT-{name}-{variant}") if name else None
    name = {"point": "Point", "box": "Bbox", "mask": "Mask"}.get(prompt_type)
    if name is None:
        return None
    return (f"finetuned_{regime}", f"SAM2-FT-{name}-{variant}")
