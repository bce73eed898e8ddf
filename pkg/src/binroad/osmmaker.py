"""Road-mask post-processing: warp-and-stitch per-frame masks, thin to a
unit-width skeleton, complete breakpoints, extract the road graph, and
export georeferenced OSM XML.

Pixel coordinates are (x, y) with x the column; homographies act on
homogeneous (x, y, 1) and map each frame into its predecessor. Overlapping
mask pixels combine by logical OR (road evidence is cumulative).
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np


@dataclass
class StitchJob:
    """Ordered (mask, homography-to-previous-frame) pairs."""

    frames: list  # [(mask HxW bool/0-1, 3x3 homography), ...]

    def __post_init__(self):
        if not self.frames:
            raise ValueError("stitch job needs at least one frame")
        for _, h in self.frames:
            h = np.asarray(h, dtype=np.float64)
            if h.shape != (3, 3) or abs(np.linalg.det(h)) <= 1e-9:
                raise ValueError("homography not invertible")


@dataclass
class StitchResult:
    mask: np.ndarray  # stitched binary mask
    origin: tuple  # (x0, y0): canvas pixel (0,0) in frame-0 coordinates


def _corners(h, w):
    return np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]], dtype=np.float64)


def stitch(job: StitchJob) -> StitchResult:
    """Compose homographies into frame-0 coordinates and OR-combine the warps."""
    transforms = []
    t = np.eye(3)
    for _, h in job.frames:
        t = t @ np.asarray(h, dtype=np.float64)
        transforms.append(t.copy())

    lo = np.array([np.inf, np.inf])
    hi = -lo
    for (mask, _), t in zip(job.frames, transforms):
        hgt, wid = np.asarray(mask).shape
        pts = (_corners(hgt, wid) @ t.T)
        pts = pts[:, :2] / pts[:, 2:]
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    x0, y0 = int(np.floor(lo[0])), int(np.floor(lo[1]))
    cw, ch = int(np.ceil(hi[0])) - x0 + 1, int(np.ceil(hi[1])) - y0 + 1

    canvas = np.zeros((ch, cw), dtype=bool)
    ys, xs = np.mgrid[0:ch, 0:cw]
    coords = np.stack([xs + x0, ys + y0, np.ones_like(xs)], axis=-1).reshape(-1, 3).astype(np.float64)
    for (mask, _), t in zip(job.frames, transforms):
        mask = np.asarray(mask).astype(bool)
        hgt, wid = mask.shape
        src = coords @ np.linalg.inv(t).T
        sx = np.rint(src[:, 0] / src[:, 2]).astype(np.int64)
        sy = np.rint(src[:, 1] / src[:, 2]).astype(np.int64)
        ok = (sx >= 0) & (sx < wid) & (sy >= 0) & (sy < hgt)
        hit = np.zeros(ch * cw, dtype=bool)
        hit[ok] = mask[sy[ok], sx[ok]]
        canvas |= hit.reshape(ch, cw)
    return StitchResult(mask=canvas, origin=(x0, y0))


# ---------------------------------------------------------------------------
# skeletonization (Zhang-Suen thinning)


def _neighbors(p):
    """P2..P9 clockwise from north, as shifted views of a padded image."""
    return [
        p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
        p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2],
    ]


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to a unit-width, 8-connected, homotopy-preserving
    skeleton (Zhang-Suen iterations until no pixel changes)."""
    img = np.asarray(mask).astype(bool)
    if img.ndim != 2:
        raise ValueError("mask must be 2-D")
    changed = True
    while changed:
        changed = False
        for step in range(2):
            padded = np.pad(img, 1)
            n = _neighbors(padded)
            count = sum(a.astype(np.uint8) for a in n)
            ring = n + [n[0]]
            transitions = sum(((~a) & b) for a, b in zip(ring, ring[1:]))
            p2, p4, p6, p8 = n[0], n[2], n[4], n[6]
            if step == 0:
                cond = (~(p2 & p4 & p6)) & (~(p4 & p6 & p8))
            else:
                cond = (~(p2 & p4 & p8)) & (~(p2 & p6 & p8))
            remove = img & (count >= 2) & (count <= 6) & (transitions == 1) & cond
            if remove.any():
                img &= ~remove
                changed = True
    return img


# ---------------------------------------------------------------------------
# breakpoint completion


def _neighbor_count(img):
    padded = np.pad(img, 1)
    return sum(a.astype(np.uint8) for a in _neighbors(padded))


def _walk_inward(img, start, steps):
    """Follow the chain from an endpoint a few pixels inward."""
    prev = None
    cur = start
    for _ in range(steps):
        y, x = cur
        nxt = None
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                ny, nx_ = y + dy, x + dx
                if 0 <= ny < img.shape[0] and 0 <= nx_ < img.shape[1] and img[ny, nx_]:
                    if (ny, nx_) != prev and (ny, nx_) != start:
                        nxt = (ny, nx_)
                        break
            if nxt:
                break
        if nxt is None:
            break
        prev, cur = cur, nxt
    return cur


def _draw_line(img, p0, p1):
    """Bresenham segment between two (y, x) pixels."""
    y0, x0 = p0
    y1, x1 = p1
    dy, dx = abs(y1 - y0), abs(x1 - x0)
    sy = 1 if y1 > y0 else -1
    sx = 1 if x1 > x0 else -1
    err = dx - dy
    y, x = y0, x0
    while True:
        img[y, x] = True
        if (y, x) == (y1, x1):
            break
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy


def complete_breakpoints(skeleton: np.ndarray, max_gap_px: float,
                         max_angle_deg: float = 30.0) -> np.ndarray:
    """Join skeleton endpoint pairs that are close and approach each other
    along roughly colinear directions (gap and angle gates)."""
    if max_gap_px < 0:
        raise ValueError("max_gap_px must be >= 0")
    img = np.asarray(skeleton).astype(bool).copy()
    if max_gap_px == 0:
        return img
    counts = _neighbor_count(img)
    endpoints = [tuple(p) for p in np.argwhere(img & (counts == 1))]
    dirs = {}
    for e in endpoints:
        back = _walk_inward(img, e, steps=5)
        v = np.array([e[0] - back[0], e[1] - back[1]], dtype=np.float64)
        norm = np.linalg.norm(v)
        dirs[e] = v / norm if norm > 0 else v

    cos_gate = np.cos(np.radians(max_angle_deg))
    candidates = []
    for i, a in enumerate(endpoints):
        for b in endpoints[i + 1 :]:
            gap_vec = np.array([b[0] - a[0], b[1] - a[1]], dtype=np.float64)
            gap = np.linalg.norm(gap_vec)
            if gap == 0 or gap > max_gap_px:
                continue
            u = gap_vec / gap
            if np.linalg.norm(dirs[a]) == 0 or np.linalg.norm(dirs[b]) == 0:
                continue
            if dirs[a] @ u >= cos_gate and dirs[b] @ (-u) >= cos_gate:
                candidates.append((gap, a, b))
    used = set()
    for gap, a, b in sorted(candidates, key=lambda c: (c[0], c[1], c[2])):
        if a in used or b in used:
            continue
        _draw_line(img, a, b)
        used.update((a, b))
    return img


# ---------------------------------------------------------------------------
# graph extraction


@dataclass
class RoadGraph:
    nodes: dict = field(default_factory=dict)  # id -> representative (x, y) pixel
    edges: list = field(default_factory=list)  # (a, b, [(x, y), ...]) incl. endpoints
    node_pixels: dict = field(default_factory=dict)  # id -> set of (x, y) in the junction cluster
    latlon: dict = field(default_factory=dict)  # id -> (lat, lon) after georeferencing

    def validate(self):
        seen = set()
        for a, b, poly in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError("edge endpoint missing from node set")
            key = (min(a, b), max(a, b), frozenset(poly))
            if key in seen:
                raise ValueError("duplicate edge")
            seen.add(key)
        return self


def _neighbors_of(img, y, x):
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ny, nx_ = y + dy, x + dx
            if 0 <= ny < img.shape[0] and 0 <= nx_ < img.shape[1] and img[ny, nx_]:
                out.append((ny, nx_))
    return out


def _cluster_nodes(node_px):
    """Group 8-adjacent node pixels into junction clusters."""
    remaining = set(node_px)
    clusters = []
    while remaining:
        seed = min(remaining)
        stack, cluster = [seed], {seed}
        remaining.discard(seed)
        while stack:
            y, x = stack.pop()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    p = (y + dy, x + dx)
                    if p in remaining:
                        remaining.discard(p)
                        cluster.add(p)
                        stack.append(p)
        clusters.append(cluster)
    return clusters


def extract_graph(skeleton: np.ndarray) -> RoadGraph:
    """Build the road graph from a unit-width skeleton.

    Pixels with != 2 skeleton neighbors are node pixels (endpoints and
    junctions); 8-adjacent node pixels merge into one junction node whose
    representative is the cluster pixel nearest its centroid. Edges are the
    degree-2 chains between clusters; isolated cycles get one anchor node
    and a self-edge.
    """
    img = np.asarray(skeleton).astype(bool)
    counts = _neighbor_count(img)
    node_px = {tuple(p) for p in np.argwhere(img & (counts != 2))}
    clusters = _cluster_nodes(node_px)
    cluster_of = {}
    graph = RoadGraph()
    for cid, cluster in enumerate(clusters):
        cy = np.mean([p[0] for p in cluster])
        cx = np.mean([p[1] for p in cluster])
        rep = min(cluster, key=lambda p: ((p[0] - cy) ** 2 + (p[1] - cx) ** 2, p))
        graph.nodes[cid] = (rep[1], rep[0])
        graph.node_pixels[cid] = {(p[1], p[0]) for p in cluster}
        for p in cluster:
            cluster_of[p] = cid

    edge_keys = set()
    visited_steps = set()

    def trace(start, first):
        poly = [start]
        prev, cur = start, first
        while cur not in cluster_of and cur != start:  # cycles close on start
            poly.append(cur)
            nxt = [n for n in _neighbors_of(img, *cur) if n != prev]
            if len(nxt) != 1:  # should not happen on a clean skeleton
                break
            prev, cur = cur, nxt[0]
        poly.append(cur)
        return poly

    for px in sorted(node_px):
        for nb in _neighbors_of(img, *px):
            if nb in cluster_of and cluster_of[nb] == cluster_of[px]:
                continue  # internal cluster adjacency
            if (px, nb) in visited_steps:
                continue
            poly = trace(px, nb)
            end = poly[-1]
            visited_steps.add((px, poly[1]))
            visited_steps.add((end, poly[-2]))
            a, b = cluster_of[px], cluster_of.get(end)
            if b is None:  # open chain ended off-cluster (degenerate skeleton)
                continue
            key = (min(a, b), max(a, b), frozenset((p[1], p[0]) for p in poly))
            if key in edge_keys:
                continue
            edge_keys.add(key)
            graph.edges.append((a, b, [(p[1], p[0]) for p in poly]))

    # isolated cycles: every remaining pixel has exactly two neighbors
    traced = {(y, x) for _, _, poly in graph.edges for x, y in poly}
    leftovers = {tuple(p) for p in np.argwhere(img)} - node_px - traced
    while leftovers:
        anchor = min(leftovers)
        cid = len(graph.nodes)
        graph.nodes[cid] = (anchor[1], anchor[0])
        graph.node_pixels[cid] = {(anchor[1], anchor[0])}
        nbs = _neighbors_of(img, *anchor)
        poly = trace(anchor, nbs[0]) if nbs else [anchor, anchor]
        graph.edges.append((cid, cid, [(p[1], p[0]) for p in poly]))
        leftovers -= set(poly)
    return graph.validate()


# ---------------------------------------------------------------------------
# georeferencing and OSM export


def fit_similarity(anchors):
    """Least-squares similarity (scale, rotation, translation) mapping pixel
    (x, y) to (lon, lat), via the complex model w = a*z + b."""
    if len(anchors) < 2:
        raise ValueError("need at least two anchors")
    z = np.array([complex(px[0], px[1]) for px, _ in anchors])
    w = np.array([complex(ll[1], ll[0]) for _, ll in anchors])  # lon + i*lat
    if np.allclose(z, z[0]):
        raise ValueError("degenerate transform: anchors are coincident")
    n = len(anchors)
    lhs = np.array([[np.vdot(z, z), z.conj().sum()], [z.sum(), n]])
    rhs = np.array([np.vdot(z, w), w.sum()])
    if abs(np.linalg.det(lhs)) < 1e-18:
        raise ValueError("degenerate transform: anchors are coincident")
    a, b = np.linalg.solve(lhs, rhs)
    return a, b


def apply_similarity(a, b, xy):
    w = a * complex(xy[0], xy[1]) + b
    return (float(w.imag), float(w.real))  # (lat, lon)


def georeference(graph: RoadGraph, anchors) -> RoadGraph:
    """Fill graph.latlon by interpolating the anchor-fit similarity."""
    a, b = fit_similarity(anchors)
    for nid, xy in graph.nodes.items():
        graph.latlon[nid] = apply_similarity(a, b, xy)
    return graph


def export_osm_xml(graph: RoadGraph, anchors, geometry_every: int = 4,
                   generator: str = "binroad") -> str:
    """Georeference the graph and emit an OSM XML v0.6-style document.

    Each edge becomes a way tagged highway=road whose nd refs are the two
    graph nodes plus every geometry_every-th interior polyline pixel.
    """
    a, b = fit_similarity(anchors)
    root = ET.Element("osm", version="0.6", generator=generator)
    next_id = [0]
    coords = {}

    def emit_node(xy):
        key = (float(xy[0]), float(xy[1]))
        if key not in coords:
            next_id[0] += 1
            nid = -next_id[0]
            lat, lon = apply_similarity(a, b, xy)
            coords[key] = (nid, lat, lon)
        return coords[key][0]

    graph_node_ids = {nid: emit_node(xy) for nid, xy in graph.nodes.items()}
    ways = []
    for a_id, b_id, poly in graph.edges:
        refs = [graph_node_ids[a_id]]
        interior = poly[1:-1]
        for i, p in enumerate(interior):
            if i % geometry_every == geometry_every - 1:
                refs.append(emit_node(p))
        refs.append(graph_node_ids[b_id])
        ways.append(refs)

    lats = [v[1] for v in coords.values()]
    lons = [v[2] for v in coords.values()]
    if lats:
        ET.SubElement(root, "bounds", minlat=repr(min(lats)), minlon=repr(min(lons)),
                      maxlat=repr(max(lats)), maxlon=repr(max(lons)))
    for nid, lat, lon in sorted(coords.values()):
        ET.SubElement(root, "node", id=str(nid), lat=repr(lat), lon=repr(lon),
                      version="1", visible="true")
    for i, refs in enumerate(ways):
        way = ET.SubElement(root, "way", id=str(-(i + 1)), version="1", visible="true")
        for ref in refs:
            ET.SubElement(way, "nd", ref=str(ref))
        ET.SubElement(way, "tag", k="highway", v="road")
    ET.indent(root)
    return ET.tostring(root, encoding="unicode", xml_declaration=True)


def parse_osm_xml(text: str):
    """Parse an OSM XML document back into (nodes, ways, tags)."""
    root = ET.fromstring(text)
    nodes = {
        int(n.get("id")): (float(n.get("lat")), float(n.get("lon")))
        for n in root.findall("node")
    }
    ways, tags = [], []
    for w in root.findall("way"):
        refs = [int(nd.get("ref")) for nd in w.findall("nd")]
        for ref in refs:
            if ref not in nodes:
                raise ValueError(f"way references missing node {ref}")
        ways.append(refs)
        tags.append({t.get("k"): t.get("v") for t in w.findall("tag")})
    return nodes, ways, tags


def estimate_translation(a: np.ndarray, b: np.ndarray):
    """Phase-correlation translation (dx, dy) such that b ~= roll(a, (dy, dx)).

    Synthetic-test helper only; real homographies come from upstream matching.
    """
    fa = np.fft.fft2(np.asarray(a, dtype=np.float64))
    fb = np.fft.fft2(np.asarray(b, dtype=np.float64))
    cross = fb * fa.conj()
    denom = np.abs(cross)
    corr = np.fft.ifft2(cross / np.maximum(denom, 1e-12)).real
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    dy, dx = peak
    if dy > a.shape[0] // 2:
        dy -= a.shape[0]
    if dx > a.shape[1] // 2:
        dx -= a.shape[1]
    return int(dx), int(dy)
