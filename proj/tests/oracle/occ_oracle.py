"""Brute-force reference implementations used to build frozen test fixtures.

Everything here is deliberately naive: per-pixel loops, no shared code with
the C++ library. The compressed RLE string codec follows the de-facto COCO
grammar (6-bit printable groups, 5 payload bits, continuation bit, deltas
against counts[i-2] from the fourth count onward).
"""

from fractions import Fraction


# ---------------------------------------------------------------------------
# geometry


def pnpoly(px, py, poly):
    """Classic even-odd ray cast; a point exactly on an edge is outside."""
    inside = False
    n = len(poly)
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > py) != (yj > py):
            cross = (xj - xi) * (py - yi) / (yj - yi) + xi
            if px < cross:
                inside = not inside
        j = i
    return inside


def rasterize_polygons(polys, h, w):
    """Union of even-odd rasters, one bit per pixel, centers tested."""
    mask = [[0] * w for _ in range(h)]
    for poly in polys:
        pts = [(poly[k], poly[k + 1]) for k in range(0, len(poly), 2)]
        for r in range(h):
            for c in range(w):
                if pnpoly(c + 0.5, r + 0.5, pts):
                    mask[r][c] = 1
    return mask


def box_raster(box, h, w):
    x, y, bw, bh = box
    m = [[0] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            cx, cy = c + 0.5, r + 0.5
            if x <= cx < x + bw and y <= cy < y + bh:
                m[r][c] = 1
    return m


def mask_area(m):
    return sum(sum(row) for row in m)


def mask_and(a, b):
    return [[x & y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def mask_or(a, b):
    return [[x | y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def coverage_fraction_exact(mask, box):
    """Fraction as an exact rational (all fixture geometry is integral)."""
    total = mask_area(mask)
    x, y, bw, bh = box
    covered = 0
    for r in range(len(mask)):
        for c in range(len(mask[0])):
            if mask[r][c]:
                cx, cy = c + 0.5, r + 0.5
                if x <= cx < x + bw and y <= cy < y + bh:
                    covered += 1
    return Fraction(covered, total)


def mask_bbox(m):
    rows = [r for r, row in enumerate(m) if any(row)]
    cols = [c for c in range(len(m[0])) if any(row[c] for row in m)]
    if not rows:
        return [0, 0, 0, 0]
    return [min(cols), min(rows), max(cols) - min(cols) + 1, max(rows) - min(rows) + 1]


# ---------------------------------------------------------------------------
# RLE codec


def rle_encode(mask):
    """Column-major runs, first run counts zeros."""
    h = len(mask)
    w = len(mask[0])
    counts = []
    prev = 0
    run = 0
    for c in range(w):
        for r in range(h):
            v = mask[r][c]
            if v != prev:
                counts.append(run)
                run = 0
                prev = v
            run += 1
    counts.append(run)
    return counts


def rle_decode(counts, h, w):
    mask = [[0] * w for _ in range(h)]
    pos = 0
    v = 0
    for cnt in counts:
        for _ in range(cnt):
            mask[pos % h][pos // h] = v
            pos += 1
        v = 1 - v
    assert pos == h * w
    return mask


def counts_to_string(counts):
    out = []
    for i in range(len(counts)):
        x = int(counts[i])
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            g = x & 0x1F
            x >>= 5
            more = (x != -1) if (g & 0x10) else (x != 0)
            if more:
                g |= 0x20
            out.append(chr(g + 48))
    return "".join(out)


def string_to_counts(s):
    counts = []
    k = 0
    while k < len(s):
        x = 0
        m = 0
        more = True
        while more:
            g = ord(s[k]) - 48
            x |= (g & 0x1F) << (5 * m)
            more = bool(g & 0x20)
            k += 1
            m += 1
            if not more and (g & 0x10):
                x |= ~((1 << (5 * m)) - 1)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_obj(mask):
    counts = rle_encode(mask)
    return {"size": [len(mask), len(mask[0])], "counts": counts_to_string(counts)}


# ---------------------------------------------------------------------------
# dataset helpers


def ann_mask(ann, h, w):
    seg = ann.get("segmentation")
    if seg is None:
        return [[0] * w for _ in range(h)]
    if isinstance(seg, dict):
        counts = seg["counts"]
        if isinstance(counts, str):
            counts = string_to_counts(counts)
        return rle_decode(counts, seg["size"][0], seg["size"][1])
    return rasterize_polygons(seg, h, w)


def annotate_dataset(ds, threshold=Fraction(1, 20), clip_mode="mask", min_area=1,
                     tool_version="0.1.0"):
    """Brute-force occlusion annotation: mark occludees whose masks are
    covered >= threshold by another annotation's bbox, verify mask
    intersections, store the union of clipped occluder masks."""
    import copy

    out = copy.deepcopy(ds)
    for ann in out["annotations"]:
        ann.pop("occlusion", None)
    by_image = {}
    for ann in out["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    id2img = {im["id"]: im for im in out["images"]}

    for img_id, anns in by_image.items():
        im = id2img[img_id]
        h, w = im["height"], im["width"]
        masks = {}
        usable = []
        for a in anns:
            if a.get("iscrowd", 0):
                continue
            m = ann_mask(a, h, w)
            if mask_area(m) == 0:
                continue
            masks[a["id"]] = m
            usable.append(a)
        for a in usable:
            cand = [b for b in usable
                    if b["id"] != a["id"]
                    and coverage_fraction_exact(masks[a["id"]], b["bbox"]) >= threshold]
            verified = [b for b in cand
                        if mask_area(mask_and(masks[a["id"]], masks[b["id"]])) > 0]
            if not verified:
                continue
            if clip_mode == "bbox":
                clip = box_raster(a["bbox"], h, w)
            else:
                clip = masks[a["id"]]
            occ = [[0] * w for _ in range(h)]
            for b in verified:
                occ = mask_or(occ, mask_and(masks[b["id"]], clip))
            area = mask_area(occ)
            if area < min_area:
                continue
            a["occlusion"] = {
                "occluder_ids": sorted(b["id"] for b in verified),
                "segmentation": rle_obj(occ),
                "area": area,
            }
    out["occlusion_info"] = {
        "coverage_threshold": float(threshold),
        "clip_mode": clip_mode,
        "tool_version": tool_version,
    }
    return out


def compute_statistics(ds):
    by_image = {}
    for ann in ds["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    images_total = len(ds["images"])
    images_annotated = sum(1 for im in ds["images"] if by_image.get(im["id"]))
    images_multi = sum(1 for im in ds["images"] if len(by_image.get(im["id"], [])) >= 2)
    images_occluded = sum(
        1 for im in ds["images"]
        if any("occlusion" in a for a in by_image.get(im["id"], [])))
    annos_total = len(ds["annotations"])
    annos_extra = sum(1 for a in ds["annotations"] if "occlusion" in a)
    return (images_total, images_annotated, images_multi, images_occluded,
            annos_total, annos_extra)
