"""Synthetic inputs: a hex/shelf/volume library and a segmented stream."""

from __future__ import annotations

import json
import os
import random
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

# A line of a random volume.  Grepping for lines that do NOT match this finds
# the needle.
UUID_LINE_RE = "^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$"

LINES_PER_VOLUME = 8

_NEEDLE_TEXT = [
    "The catalogue ends here, and so does the search.",
    "Whoever reads this has found the one ordered book in the library.",
    "Every other volume is noise; this one was written on purpose.",
]

_WORDS = (
    "river stone lamp orbit paper cedar signal harbor violet anchor meadow copper "
    "lantern quarry ember willow marble thistle comet saddle"
).split()


@dataclass(frozen=True)
class LibrarySpec:
    hex_count: int
    shelf_count: int
    volume_count: int
    seed: int = 0

    def __post_init__(self):
        if min(self.hex_count, self.shelf_count, self.volume_count) < 1:
            raise ValueError("hex, shelf and volume counts must be positive")

    @property
    def file_count(self) -> int:
        return self.hex_count * self.shelf_count * self.volume_count


@dataclass
class Manifest:
    root: str
    spec: LibrarySpec
    paths: list[str] = field(default_factory=list)
    needle_path: str = ""

    def hex_dirs(self) -> list[str]:
        return [os.path.join(self.root, hex_name(h)) for h in range(self.spec.hex_count)]

    def shelf_dirs(self, hex_dir: str) -> list[str]:
        return [os.path.join(hex_dir, shelf_name(s)) for s in range(self.spec.shelf_count)]

    def to_dict(self) -> dict:
        return {"root": self.root, "spec": asdict(self.spec), "needle_path": self.needle_path,
                "file_count": len(self.paths)}


def hex_name(i: int) -> str:
    return f"hex_{i:02d}"


def shelf_name(i: int) -> str:
    return f"shelf_{i:02d}"


def volume_name(i: int) -> str:
    return f"volume_{i:05d}.txt"


def needle_location(spec: LibrarySpec) -> tuple[int, int, int]:
    rng = random.Random(f"needle:{spec.seed}")
    return (rng.randrange(spec.hex_count), rng.randrange(spec.shelf_count),
            rng.randrange(spec.volume_count))


def volume_text(spec: LibrarySpec, h: int, s: int, v: int) -> str:
    if (h, s, v) == needle_location(spec):
        return "\n".join(_NEEDLE_TEXT) + "\n"
    rng = random.Random(f"vol:{spec.seed}:{h}:{s}:{v}")
    return "".join(str(uuid.UUID(int=rng.getrandbits(128), version=4)) + "\n"
                   for _ in range(LINES_PER_VOLUME))


def generate_library(spec: LibrarySpec, root: str | os.PathLike) -> Manifest:
    """Write the library under ``root``; the same spec always yields the same bytes."""
    root = os.path.abspath(root)
    manifest = Manifest(root, spec)
    nh, ns, nv = needle_location(spec)
    for h in range(spec.hex_count):
        for s in range(spec.shelf_count):
            d = Path(root, hex_name(h), shelf_name(s))
            d.mkdir(parents=True, exist_ok=True)
            for v in range(spec.volume_count):
                p = d / volume_name(v)
                p.write_text(volume_text(spec, h, s, v), encoding="utf-8")
                manifest.paths.append(str(p))
                if (h, s, v) == (nh, ns, nv):
                    manifest.needle_path = str(p)
    with open(os.path.join(root, "MANIFEST.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
    return manifest


@dataclass(frozen=True)
class StreamSpec:
    segment_count: int
    needle_index: int
    tokens_per_segment: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.segment_count < 1 or self.tokens_per_segment < 1:
            raise ValueError("segment_count and tokens_per_segment must be positive")
        if not 0 <= self.needle_index < self.segment_count:
            raise ValueError("needle_index must be in [0, segment_count)")


def stream_segments(spec: StreamSpec) -> list[str]:
    """One line per segment; the needle segment carries a hash-tagged essay."""
    rng = random.Random(f"stream:{spec.seed}")
    out = []
    for i in range(spec.segment_count):
        if i == spec.needle_index:
            tag = f"{rng.getrandbits(32):08x}"
            words = ["needle", tag, "short", "essay", "about", "distance:"]
        else:
            words = [f"seg{i}"]
        while len(words) < spec.tokens_per_segment:
            words.append(rng.choice(_WORDS))
        out.append(" ".join(words))
    return out


def write_stream(spec: StreamSpec, path: str | os.PathLike) -> list[str]:
    segments = stream_segments(spec)
    Path(path).write_text("".join(s + "\n" for s in segments), encoding="utf-8")
    return segments
