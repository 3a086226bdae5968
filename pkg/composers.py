import os
import re
import json
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel

from errors import UnknownComposer

REGISTRY_PATH = os.getenv(
    "COMPOSER_REGISTRY",
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "composers.json"),
)


class ComposerInfo(BaseModel):
    slug: str
    name: str
    dates: str = ""
    duration_scale: str = "1"
    collections: Dict[str, int] = {}

    @property
    def score_count(self) -> int:
        return sum(self.collections.values())

    @property
    def scale(self) -> Fraction:
        return Fraction(self.duration_scale)


def slugify(name: str) -> str:
    """'D. Scarlatti' -> 'd-scarlatti', 'de la Rue' -> 'de-la-rue'."""
    slug = re.sub(r"[^a-z0-9]+", "-", name.strip().lower())
    return slug.strip("-")


@lru_cache(maxsize=4)
def load_registry(path: str = REGISTRY_PATH) -> Dict[str, ComposerInfo]:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return {slug: ComposerInfo(slug=slug, **info) for slug, info in raw.items()}


def get_composer(slug: str) -> Optional[ComposerInfo]:
    return load_registry().get(slugify(slug))


def display_name(slug: str) -> str:
    info = get_composer(slug)
    return info.name if info else slug


def corpus_order(slugs: List[str], counts: Optional[Dict[str, int]] = None) -> List[str]:
    """
    Order composers by score count, smallest first, the way result tables
    list them. Counts from the actual corpus win over registry counts.
    """
    def key(slug):
        if counts and slug in counts:
            n = counts[slug]
        else:
            info = get_composer(slug)
            n = info.score_count if info else 0
        return (n, slug)

    return sorted(slugs, key=key)


def parse_selectors(spec: str) -> List[Tuple[str, Optional[str]]]:
    """
    "bach:chorales, haydn" -> [("bach", "chorales"), ("haydn", None)]
    """
    selectors = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        composer, _, collection = part.partition(":")
        composer = slugify(composer)
        if not composer:
            raise UnknownComposer(f"empty composer in selector {part!r}")
        selectors.append((composer, slugify(collection) if collection else None))
    if not selectors:
        raise UnknownComposer("no composers selected")
    return selectors
