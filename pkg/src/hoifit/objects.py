"""Procedural object catalog.

Every family carries small asymmetric parts (a latch, a half shelf, a backrest...) so
that its principal axes are well separated and each axis has a skewed vertex
distribution; a plain cuboid is available as ``"cuboid"`` for symmetric cases.
Templates are centred on their vertex centroid with y up.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriMesh, box_mesh, merge_meshes

SPACING = 0.05


def _assemble(parts, spacing):
    mesh = merge_meshes(box_mesh(size, center, spacing) for size, center in parts)
    return TriMesh(mesh.vertices - mesh.vertices.mean(axis=0), mesh.faces)


def cuboid(size=(0.5, 0.35, 0.25), spacing=SPACING) -> TriMesh:
    return _assemble([(size, (0.0, 0.0, 0.0))], spacing)


def box(width=0.45, height=0.30, depth=0.32, spacing=SPACING) -> TriMesh:
    """Storage box with a latch block on one upper corner and a handle on the front."""
    w, h, d = width, height, depth
    parts = [
        ((w, h, d), (0.0, 0.0, 0.0)),
        ((0.10, 0.05, 0.06), (w / 2 - 0.08, h / 2 + 0.025, -d / 2 + 0.06)),
        ((0.14, 0.06, 0.04), (0.05, 0.05, d / 2 + 0.02)),
    ]
    return _assemble(parts, spacing)


def table(width=1.2, depth=0.7, height=0.72, top=0.04, leg=0.05, spacing=SPACING) -> TriMesh:
    """Four-legged table with a half shelf in one quadrant."""
    w, d = width, depth
    parts = [((w, top, d), (0.0, height - top / 2, 0.0))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(((leg, height - top, leg),
                          (sx * (w / 2 - leg), (height - top) / 2, sz * (d / 2 - leg))))
    parts.append(((w / 2 - leg, 0.03, d / 2), (w / 4, 0.25, d / 4 - leg / 2)))
    return _assemble(parts, spacing)


def board(length=1.0, width=0.32, thickness=0.03, spacing=SPACING) -> TriMesh:
    """Plank with a cleat across one end and a stop block on one edge."""
    parts = [
        ((length, thickness, width), (0.0, 0.0, 0.0)),
        ((0.05, 0.04, width), (length / 2 - 0.08, thickness / 2 + 0.02, 0.0)),
        ((0.25, 0.05, 0.04), (-0.15, thickness / 2 + 0.025, width / 2 - 0.02)),
    ]
    return _assemble(parts, spacing)


def stool(seat=0.36, height=0.48, leg=0.04, spacing=SPACING) -> TriMesh:
    """Three-legged stool with a footrest bar on one side."""
    parts = [((seat, 0.04, seat * 0.85), (0.0, height - 0.02, 0.0))]
    for x, z in ((-seat / 2 + leg, -seat * 0.35), (-seat / 2 + leg, seat * 0.35), (seat / 2 - leg, 0.0)):
        parts.append(((leg, height - 0.04, leg), (x, (height - 0.04) / 2, z)))
    parts.append(((0.03, 0.03, seat * 0.7), (-seat / 2 + leg, 0.16, 0.0)))
    return _assemble(parts, spacing)


def chair(seat=0.42, height=0.45, back=0.42, leg=0.04, spacing=SPACING) -> TriMesh:
    """Chair with a backrest and a single armrest."""
    parts = [((seat, 0.04, seat), (0.0, height - 0.02, 0.0))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(((leg, height - 0.04, leg),
                          (sx * (seat / 2 - leg / 2), (height - 0.04) / 2, sz * (seat / 2 - leg / 2))))
    parts.append(((seat, back, 0.04), (0.0, height + back / 2, -seat / 2 + 0.02)))
    parts.append(((0.04, 0.04, seat * 0.8), (seat / 2 - 0.02, height + 0.2, 0.0)))
    return _assemble(parts, spacing)


CATALOG = {"box": box, "table": table, "board": board, "stool": stool, "chair": chair,
           "cuboid": cuboid}


def make_object(name: str, **params) -> TriMesh:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown object family {name!r}; known: {sorted(CATALOG)}") from None
    return factory(**params)
