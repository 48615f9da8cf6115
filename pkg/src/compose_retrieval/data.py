"""Synthetic attribute world, triplet sampling, and triplet/gallery file formats.

Triplet files are line-delimited JSON, one record per line::

    {"reference_id": "17", "text": [0.0, 1.0, ...], "target_id": "203",
     "subset": ["203", "5", "88"], "changes": [[2, 3]]}

``reference_id``/``target_id`` (and ``subset`` members) are gallery ids from the
manifest.  ``text`` is the modification payload.  ``subset`` and ``changes``
are optional.  Blank lines are ignored.

A gallery manifest is a JSON document::

    {"format": "gallery-manifest", "version": 1, "payload_file": "gallery.npy",
     "ids": ["0", "1", ...], "latents": [[...], ...]}

where row ``i`` of ``payload_file`` (relative to the manifest) is the image
payload of ``ids[i]``; ``latents`` is present for synthetic galleries only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, WorldSpec

MANIFEST_VERSION = 1


class TripletFormatError(ValueError):
    """Malformed or unresolvable triplet record."""


@dataclass
class World:
    spec: WorldSpec
    latents: np.ndarray  # (G, A) ints in [0, V)
    payloads: np.ndarray  # (G, image_dim)
    render_map: np.ndarray  # (A * V, image_dim)
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.latents))]
        self._index = {tuple(int(v) for v in row): i for i, row in enumerate(self.latents)}

    @property
    def size(self) -> int:
        return len(self.latents)

    def lookup(self, latent: Sequence[int]) -> int | None:
        return self._index.get(tuple(int(v) for v in latent))


@dataclass
class Triplet:
    reference_id: int  # gallery index
    text: np.ndarray
    target_id: int
    changes: tuple[tuple[int, int], ...] | None = None  # (attribute, new value), synthetic only
    subset: tuple[int, ...] | None = None

    def __eq__(self, other):
        if not isinstance(other, Triplet):
            return NotImplemented
        return (
            self.reference_id == other.reference_id
            and self.target_id == other.target_id
            and np.array_equal(self.text, other.text)
            and self.changes == other.changes
            and self.subset == other.subset
        )


def one_hot(latents: np.ndarray, V: int) -> np.ndarray:
    latents = np.asarray(latents)
    out = np.zeros(latents.shape[:-1] + (latents.shape[-1] * V,))
    cols = np.arange(latents.shape[-1]) * V + latents
    np.put_along_axis(out, cols, 1.0, axis=-1)
    return out


def render(latents: np.ndarray, render_map: np.ndarray, V: int, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    clean = one_hot(latents, V) @ render_map
    if noise_std == 0:
        return clean
    return clean + noise_std * rng.standard_normal(clean.shape)


def generate_world(spec: WorldSpec) -> tuple[World, np.random.Generator]:
    """Gallery of ``G`` images with distinct uniformly drawn latent vectors.

    Returns the world and the generator that produced it (so callers can keep
    drawing from the same stream).
    """
    spec.validate()
    A, V, G = spec.num_latent_attributes, spec.values_per_attribute, spec.gallery_size
    rng = np.random.default_rng(spec.render_seed)
    render_map = rng.standard_normal((A * V, spec.image_dim)) / np.sqrt(A)
    total = V**A
    if total <= 10**7:
        codes = rng.choice(total, size=G, replace=False)
        latents = np.stack([(codes // V**a) % V for a in range(A)], axis=1)
    else:
        seen: dict[tuple[int, ...], None] = {}
        while len(seen) < G:
            seen.setdefault(tuple(rng.integers(V, size=A).tolist()), None)
        latents = np.array(list(seen))
    payloads = render(latents, render_map, V, spec.noise_std, rng)
    return World(spec, latents.astype(np.int64), payloads, render_map), rng


def encode_changes(changes: Iterable[tuple[int, int]], A: int, V: int) -> np.ndarray:
    """One one-hot slot of width ``V + 1`` per attribute; slot index 0 means unchanged."""
    slots = np.zeros(A, dtype=np.int64)
    for attr, value in changes:
        slots[attr] = value + 1
    out = np.zeros(A * (V + 1))
    out[np.arange(A) * (V + 1) + slots] = 1.0
    return out


def decode_changes(text: np.ndarray, A: int, V: int) -> tuple[tuple[int, int], ...]:
    slots = np.asarray(text).reshape(A, V + 1).argmax(axis=1)
    return tuple((a, int(s) - 1) for a, s in enumerate(slots) if s > 0)


def sample_triplets(
    world: World,
    n: int,
    max_changes: int,
    seed: int,
    subset_size: int = 0,
    num_changes: int | None = None,
    max_retries: int = 10_000,
) -> list[Triplet]:
    """Draw ``n`` (reference, modification, target) triplets from ``world``.

    Each triplet changes between 1 and ``max_changes`` distinct attributes to a
    different value; draws whose modified latent is not in the gallery are
    redrawn.  ``num_changes`` pins the change count (0 gives the identity
    modification).
    """
    A, V = world.spec.num_latent_attributes, world.spec.values_per_attribute
    if not 1 <= max_changes <= A:
        raise ConfigError(f"max_changes must lie in [1, {A}]")
    if subset_size and subset_size > world.size:
        raise ConfigError("subset_size exceeds gallery size")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        for _attempt in range(max_retries):
            ref = int(rng.integers(world.size))
            k = int(rng.integers(1, max_changes + 1)) if num_changes is None else num_changes
            attrs = rng.choice(A, size=k, replace=False)
            latent = world.latents[ref].copy()
            changes = []
            for a in sorted(int(x) for x in attrs):
                # shift past the current value so the attribute really changes
                new = int(rng.integers(V - 1))
                new += int(new >= latent[a])
                latent[a] = new
                changes.append((a, new))
            target = world.lookup(latent)
            if target is not None:
                break
        else:
            raise RuntimeError(f"no valid target found after {max_retries} draws; gallery too sparse")
        subset = None
        if subset_size:
            others = rng.choice(np.delete(np.arange(world.size), target), size=subset_size - 1, replace=False)
            subset = tuple([target, *sorted(int(o) for o in others)])
        out.append(Triplet(ref, encode_changes(changes, A, V), target, tuple(changes), subset))
    return out


# -- files -------------------------------------------------------------------


def write_gallery(world: World, directory: str | Path, name: str = "gallery") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{name}.npy", world.payloads)
    manifest = {
        "format": "gallery-manifest",
        "version": MANIFEST_VERSION,
        "payload_file": f"{name}.npy",
        "ids": world.ids,
        "latents": world.latents.tolist(),
        "world": vars(world.spec),
        "render_map_file": f"{name}_render_map.npy",
    }
    np.save(directory / f"{name}_render_map.npy", world.render_map)
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest) + "\n")
    return path


@dataclass
class Gallery:
    ids: list[str]
    payloads: np.ndarray
    latents: np.ndarray | None = None

    def index(self) -> dict[str, int]:
        return {gid: i for i, gid in enumerate(self.ids)}


def read_gallery(path: str | Path) -> Gallery:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TripletFormatError(f"{path}: invalid manifest JSON ({exc})") from exc
    if manifest.get("format") != "gallery-manifest" or manifest.get("version") != MANIFEST_VERSION:
        raise TripletFormatError(f"{path}: not a version-{MANIFEST_VERSION} gallery manifest")
    payloads = np.load(path.parent / manifest["payload_file"])
    ids = [str(i) for i in manifest["ids"]]
    if len(ids) != len(payloads):
        raise TripletFormatError(f"{path}: {len(ids)} ids but {len(payloads)} payload rows")
    latents = np.asarray(manifest["latents"], dtype=np.int64) if manifest.get("latents") else None
    return Gallery(ids, payloads, latents)


def read_world(path: str | Path) -> World:
    """Reload a synthetic world written by :func:`write_gallery`."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    gallery = read_gallery(path)
    if gallery.latents is None or "world" not in manifest:
        raise TripletFormatError(f"{path}: not a synthetic gallery (no latents)")
    render_map = np.load(path.parent / manifest["render_map_file"])
    return World(WorldSpec(**manifest["world"]), gallery.latents, gallery.payloads, render_map, gallery.ids)


def write_triplets(path: str | Path, triplets: Sequence[Triplet], ids: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            rec = {"reference_id": ids[t.reference_id], "text": t.text.tolist(), "target_id": ids[t.target_id]}
            if t.subset is not None:
                rec["subset"] = [ids[s] for s in t.subset]
            if t.changes is not None:
                rec["changes"] = [list(c) for c in t.changes]
            fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class TripletFormat:
    """How to read a triplet file: gallery ids to resolve against and the expected text width."""

    ids: tuple[str, ...]
    text_dim: int | None = None


def ingest_triplet_file(path: str | Path, fmt: TripletFormat) -> list[Triplet]:
    index = {gid: i for i, gid in enumerate(fmt.ids)}
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TripletFormatError(f"{where}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TripletFormatError(f"{where}: record must be a JSON object")
            for key in ("reference_id", "text", "target_id"):
                if key not in rec:
                    raise TripletFormatError(f"{where}: missing field {key!r}")

            def resolve(gid):
                if str(gid) not in index:
                    raise TripletFormatError(f"{where}: unknown gallery id {gid!r}")
                return index[str(gid)]

            text = np.asarray(rec["text"], dtype=np.float64)
            if text.ndim != 1 or (fmt.text_dim is not None and text.shape[0] != fmt.text_dim):
                raise TripletFormatError(f"{where}: text payload has shape {text.shape}, expected ({fmt.text_dim},)")
            subset = tuple(resolve(s) for s in rec["subset"]) if rec.get("subset") is not None else None
            changes = tuple((int(a), int(v)) for a, v in rec["changes"]) if rec.get("changes") is not None else None
            out.append(Triplet(resolve(rec["reference_id"]), text, resolve(rec["target_id"]), changes, subset))
    return out
