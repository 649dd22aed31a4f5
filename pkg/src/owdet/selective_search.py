"""Region proposals: graph-based over-segmentation followed by greedy
hierarchical merging of the most similar adjacent regions.

Simplifications relative to the classic recipe: single RGB color space,
single scale k, color+size+fill similarity (no texture channel), and
4-connectivity. Output ranking is deterministic for a fixed seed.
"""

from dataclasses import dataclass

import numpy as np

HIST_BINS = 25


@dataclass
class Segmentation:
    labels: np.ndarray  # (H, W) region id per pixel
    region_count: int


@dataclass
class Region:
    size: int
    bbox: tuple  # (x1, y1, x2, y2) pixel coordinates, exclusive right/bottom
    hist: np.ndarray  # (3, HIST_BINS), each channel L1-normalized


def _as_float_image(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ValueError(f"expected nonempty (H, W, 3) image, got {img.shape}")
    if img.max(initial=0.0) <= 1.0:
        img = img * 255.0
    return img


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.intp)
        self.size = np.ones(n, dtype=np.intp)

    def find(self, x):
        root = x
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        # larger component becomes the root; ties keep the smaller id
        if self.size[a] < self.size[b] or (self.size[a] == self.size[b] and b < a):
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def graph_segment(image, k=100.0, min_size=10):
    """Minimum-spanning-tree segmentation with threshold tau(C) = k / |C|.

    Edges are 4-neighbor RGB Euclidean distances, processed in ascending
    weight order; after the main pass, components smaller than min_size
    are absorbed across their cheapest boundary edges.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    img = _as_float_image(image)
    h, w = img.shape[:2]
    idx = np.arange(h * w).reshape(h, w)
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = img.reshape(-1, 3)
    weights = np.sqrt(((flat[ea] - flat[eb]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")

    uf = _UnionFind(h * w)
    internal = np.zeros(h * w)
    for ei in order:
        a = uf.find(ea[ei])
        b = uf.find(eb[ei])
        if a == b:
            continue
        wgt = weights[ei]
        if wgt <= internal[a] + k / uf.size[a] and wgt <= internal[b] + k / uf.size[b]:
            root = uf.union(a, b)
            internal[root] = wgt
    for ei in order:
        a = uf.find(ea[ei])
        b = uf.find(eb[ei])
        if a != b and (uf.size[a] < min_size or uf.size[b] < min_size):
            uf.union(a, b)

    roots = np.fromiter((uf.find(i) for i in range(h * w)), dtype=np.intp, count=h * w)
    _, labels = np.unique(roots, return_inverse=True)
    return Segmentation(labels=labels.reshape(h, w), region_count=int(labels.max()) + 1)


def _histogram(values):
    """(M, 3) pixel values in [0, 255] -> per-channel normalized histogram."""
    bins = np.minimum((values * HIST_BINS / 256.0).astype(np.intp), HIST_BINS - 1)
    hist = np.zeros((3, HIST_BINS))
    for c in range(3):
        hist[c] = np.bincount(bins[:, c], minlength=HIST_BINS)
    return hist / max(1, values.shape[0])


def build_regions(seg: Segmentation, image):
    img = _as_float_image(image)
    flat_labels = seg.labels.ravel()
    h, w = seg.labels.shape
    ys, xs = np.divmod(np.arange(h * w), w)
    regions = []
    order = np.argsort(flat_labels, kind="stable")
    bounds = np.searchsorted(flat_labels[order], np.arange(seg.region_count + 1))
    flat_img = img.reshape(-1, 3)
    for rid in range(seg.region_count):
        sel = order[bounds[rid]:bounds[rid + 1]]
        rx, ry = xs[sel], ys[sel]
        regions.append(Region(
            size=int(sel.size),
            bbox=(int(rx.min()), int(ry.min()), int(rx.max()) + 1, int(ry.max()) + 1),
            hist=_histogram(flat_img[sel]),
        ))
    return regions


def _merge_bbox(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def region_similarity(a: Region, b: Region, image_size):
    """Mean of color, size, and fill similarity, each in [0, 1].

    Color is the mean over channels of the histogram intersection; size
    discourages gobbling large regions early; fill prefers merges whose
    union bounding box has little empty space.
    """
    color = float(np.minimum(a.hist, b.hist).sum() / 3.0)
    size_sim = 1.0 - (a.size + b.size) / image_size
    mx1, my1, mx2, my2 = _merge_bbox(a.bbox, b.bbox)
    bb_area = (mx2 - mx1) * (my2 - my1)
    fill = 1.0 - (bb_area - a.size - b.size) / image_size
    clamp = lambda v: min(1.0, max(0.0, v))
    return (clamp(color) + clamp(size_sim) + clamp(fill)) / 3.0


def _adjacency(labels):
    pairs = set()
    a, b = labels[:, :-1].ravel(), labels[:, 1:].ravel()
    for p, q in zip(a[a != b], b[a != b]):
        pairs.add((min(p, q), max(p, q)))
    a, b = labels[:-1, :].ravel(), labels[1:, :].ravel()
    for p, q in zip(a[a != b], b[a != b]):
        pairs.add((min(p, q), max(p, q)))
    return {(int(p), int(q)) for p, q in pairs}


def hierarchical_merge(seg: Segmentation, image, seed=0):
    """Merge the most similar adjacent pair until one region remains.

    Every region ever alive contributes its bounding box. Ranking follows
    the classic randomized rule: the last-created region gets base rank 1,
    earlier regions count up from there, and each is multiplied by a seeded
    uniform draw. Merged object-scale regions therefore tend to outrank
    initial noise fragments. Duplicate boxes keep their best rank. Returns
    (M, 4) cxcywh boxes normalized to the image, best rank first.
    """
    img = _as_float_image(image)
    h, w = img.shape[:2]
    image_size = h * w
    regions = dict(enumerate(build_regions(seg, image)))
    records = [regions[i].bbox for i in sorted(regions)]

    neighbors = {i: set() for i in regions}
    for p, q in _adjacency(seg.labels):
        neighbors[p].add(q)
        neighbors[q].add(p)
    sims = {(p, q): region_similarity(regions[p], regions[q], image_size)
            for p in regions for q in neighbors[p] if p < q}

    next_id = len(regions)
    while sims:
        best_pair = None
        best_sim = -1.0
        for pair, s in sims.items():
            if s > best_sim or (s == best_sim and pair < best_pair):
                best_pair, best_sim = pair, s
        a, b = best_pair
        ra, rb = regions.pop(a), regions.pop(b)
        merged = Region(
            size=ra.size + rb.size,
            bbox=_merge_bbox(ra.bbox, rb.bbox),
            hist=(ra.hist * ra.size + rb.hist * rb.size) / (ra.size + rb.size),
        )
        records.append(merged.bbox)
        nbrs = (neighbors.pop(a) | neighbors.pop(b)) - {a, b}
        for key in [k for k in sims if a in k or b in k]:
            del sims[key]
        regions[next_id] = merged
        neighbors[next_id] = set()
        for x in nbrs:
            neighbors[x].discard(a)
            neighbors[x].discard(b)
            neighbors[x].add(next_id)
            neighbors[next_id].add(x)
            sims[(x, next_id)] = region_similarity(regions[x], merged, image_size)
        next_id += 1

    rng = np.random.default_rng(seed)
    base = np.arange(len(records), 0, -1)  # last created -> rank 1
    priority = rng.uniform(size=len(records)) * base
    order = np.argsort(priority, kind="stable")
    seen = set()
    boxes = []
    for i in order:
        bbox = records[i]
        if bbox in seen:
            continue
        seen.add(bbox)
        x1, y1, x2, y2 = bbox
        boxes.append([(x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h])
    return np.array(boxes) if boxes else np.zeros((0, 4))


def propose(image, k=300.0, min_size=20, seed=0):
    """Full pipeline: segment, merge, rank. Returns cxcywh boxes.

    Defaults favor a small, object-heavy proposal pool: a high merge
    threshold absorbs background noise fragments before they can emit
    their own boxes.
    """
    seg = graph_segment(image, k=k, min_size=min_size)
    return hierarchical_merge(seg, image, seed=seed)
