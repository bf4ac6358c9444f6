"""Procedural street-scene generator for the two training domains.

Dense-domain scenes are fully labeled street layouts: sky gradient,
buildings on the horizon, a road trapezoid with lane marks, sidewalks,
vegetation blobs, and a few foreground objects placed in plausible spots.
Sparse-domain scenes show the same object renderers scattered over cluttered
void background with only the objects labeled.  Object appearance is drawn
from one shared distribution in both domains.

Everything is driven by a caller-provided numpy Generator, so scenes are
reproducible from an :class:`~segdistill.rng.RngState`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError

VOID = 255


@dataclass(frozen=True)
class Palette:
    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    structural: tuple[int, ...]
    objects: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def object_names(self) -> tuple[str, ...]:
        return tuple(self.names[i] for i in self.objects)


PALETTES = {
    8: Palette(
        names=("sky", "building", "road", "sidewalk", "vegetation",
               "car", "pedestrian", "sign"),
        colors=((120, 180, 240), (160, 120, 90), (90, 90, 95), (180, 175, 165),
                (60, 140, 60), (200, 45, 40), (225, 180, 150), (240, 205, 50)),
        structural=(0, 1, 2, 3, 4),
        objects=(5, 6, 7)),
    11: Palette(
        names=("sky", "building", "road", "sidewalk", "fence", "vegetation",
               "pole", "car", "sign", "pedestrian", "cyclist"),
        colors=((120, 180, 240), (160, 120, 90), (90, 90, 95), (180, 175, 165),
                (150, 100, 60), (60, 140, 60), (125, 125, 125), (200, 45, 40),
                (240, 205, 50), (225, 180, 150), (80, 40, 120)),
        structural=(0, 1, 2, 3, 4, 5),
        objects=(6, 7, 8, 9, 10)),
}


def get_palette(num_classes: int) -> Palette:
    try:
        return PALETTES[num_classes]
    except KeyError:
        raise ConfigError(f"no palette with {num_classes} classes; "
                          f"available: {sorted(PALETTES)}") from None


# ---------------------------------------------------------------------------
# object renderers: return (rgb float patch, boolean mask, local label patch)

_CAR_BODIES = ((205, 45, 40), (45, 80, 205), (235, 235, 240), (30, 30, 36))
_SHIRTS = ((210, 60, 140), (250, 140, 30), (30, 160, 210), (130, 30, 30))


def _render_car(gen, height):
    h = max(6, height)
    w = int(h * 1.8)
    patch = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    body = np.array(_CAR_BODIES[gen.integers(len(_CAR_BODIES))], dtype=float)
    body = body * gen.uniform(0.85, 1.15)
    roof_top = h // 4
    body_top = h // 2
    cab_l, cab_r = w // 5, w - w // 4
    patch[roof_top:body_top, cab_l:cab_r] = body * 0.9
    mask[roof_top:body_top, cab_l:cab_r] = True
    win_t = roof_top + max(1, (body_top - roof_top) // 4)
    if win_t < body_top and cab_r - cab_l > 4:
        patch[win_t:body_top, cab_l + 1:cab_r - 1] = (70, 95, 120)
    wheel_row = h - max(1, h // 5)
    patch[body_top:wheel_row, :] = body
    mask[body_top:wheel_row, :] = True
    r = max(1, h // 5)
    for cx in (w // 5, w - w // 5 - 1):
        yy, xx = np.ogrid[:h, :w]
        disc = (yy - (h - r)) ** 2 + (xx - cx) ** 2 <= r * r
        patch[disc] = (20, 20, 22)
        mask |= disc
    return patch, mask


def _render_pedestrian(gen, height):
    h = max(6, height)
    w = max(3, h // 3)
    patch = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    skin = np.array((225, 180, 150), dtype=float) * gen.uniform(0.9, 1.1)
    shirt = np.array(_SHIRTS[gen.integers(len(_SHIRTS))], dtype=float)
    shirt = shirt * gen.uniform(0.85, 1.15)
    head_h = max(1, h // 4)
    torso_h = max(1, (h - head_h) // 2)
    cx0, cx1 = max(0, w // 2 - max(1, w // 3)), min(w, w // 2 + max(1, w // 3) + 1)
    patch[:head_h, cx0:cx1] = skin
    mask[:head_h, cx0:cx1] = True
    patch[head_h:head_h + torso_h, :] = shirt
    mask[head_h:head_h + torso_h, :] = True
    leg_w = max(1, w // 3)
    patch[head_h + torso_h:, :leg_w] = (35, 35, 45)
    patch[head_h + torso_h:, w - leg_w:] = (35, 35, 45)
    mask[head_h + torso_h:, :leg_w] = True
    mask[head_h + torso_h:, w - leg_w:] = True
    return patch, mask


def _render_sign(gen, height):
    h = max(5, height)
    w = max(3, (h * 2) // 3)
    patch = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    face = np.array((240, 205, 50) if gen.random() < 0.6 else (220, 60, 50),
                    dtype=float) * gen.uniform(0.9, 1.1)
    head_h = max(2, (h * 3) // 5)
    shape = gen.integers(3)
    if shape == 0:                                   # disc
        r = head_h / 2.0
        yy, xx = np.ogrid[:h, :w]
        region = (yy - r) ** 2 + (xx - w / 2.0) ** 2 <= r * r
    elif shape == 1:                                 # triangle
        region = np.zeros((h, w), dtype=bool)
        for row in range(head_h):
            half = int(np.ceil((row + 1) / (2.0 * head_h) * w))
            region[row, max(0, w // 2 - half):min(w, w // 2 + half)] = True
    else:                                            # square
        region = np.zeros((h, w), dtype=bool)
        region[:head_h, :] = True
    patch[region] = face
    mask |= region
    pole_col = w // 2
    patch[head_h:, pole_col] = (110, 110, 115)
    mask[head_h:, pole_col] = True
    return patch, mask


def _render_pole(gen, height):
    h = max(6, height)
    w = max(1, h // 8)
    patch = np.full((h, w, 3), 125.0) * gen.uniform(0.85, 1.1)
    mask = np.ones((h, w), dtype=bool)
    return patch, mask


def _render_cyclist(gen, height):
    h = max(7, height)
    patch_p, mask_p = _render_pedestrian(gen, (h * 2) // 3)
    ph, pw, _ = patch_p.shape
    r = max(2, h // 4)
    w = max(pw, 2 * r + 1)
    patch = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    x0 = (w - pw) // 2
    patch[:ph, x0:x0 + pw][mask_p] = patch_p[mask_p]
    mask[:ph, x0:x0 + pw] |= mask_p
    yy, xx = np.ogrid[:h, :w]
    ring = np.abs((yy - (h - r - 1)) ** 2 + (xx - w // 2) ** 2 - r * r) <= r
    patch[ring] = (25, 25, 30)
    mask |= ring
    return patch, mask


_RENDERERS = {"car": _render_car, "pedestrian": _render_pedestrian,
              "sign": _render_sign, "pole": _render_pole,
              "cyclist": _render_cyclist}


def render_object(gen, name, height):
    """Render one labeled object patch; shared by both domains."""
    return _RENDERERS[name](gen, height)


# ---------------------------------------------------------------------------
# scene assembly

def _blit(img, labels, patch, mask, top, left, class_id):
    h, w = mask.shape
    ih, iw = labels.shape
    t0, l0 = max(0, top), max(0, left)
    t1, l1 = min(ih, top + h), min(iw, left + w)
    if t1 <= t0 or l1 <= l0:
        return 0
    sub = mask[t0 - top:t1 - top, l0 - left:l1 - left]
    img[t0:t1, l0:l1][sub] = patch[t0 - top:t1 - top, l0 - left:l1 - left][sub]
    labels[t0:t1, l0:l1][sub] = class_id
    return int(sub.sum())


def _place_objects(gen, img, labels, palette, count, rows_for, max_cover=0.35):
    """Draw ``count`` objects; ``rows_for(name, h, w_patch)`` yields a
    (top, left) position.  Far (higher) objects are drawn first."""
    h, w = labels.shape
    plan = []
    for _ in range(count):
        name = palette.object_names()[gen.integers(len(palette.objects))]
        size = int(gen.integers(max(6, h // 8), max(8, h // 4) + 1))
        patch, mask = render_object(gen, name, size)
        top, left = rows_for(name, patch.shape[0], patch.shape[1])
        plan.append((top, left, name, patch, mask))
    covered = 0
    budget = int(max_cover * h * w)
    for top, left, name, patch, mask in sorted(plan, key=lambda e: e[0]):
        if covered + int(mask.sum()) > budget:
            continue
        jitter = gen.normal(0.0, 5.0, size=patch.shape)
        covered += _blit(img, labels, patch + jitter, mask, top, left,
                         palette.id_of(name))
    return covered


def _count(gen, lo, hi):
    return int(gen.integers(lo, hi + 1))


def generate_dense_scene(gen, palette: Palette, width: int, height: int,
                         objects=(0, 3)):
    """Fully labeled street scene; returns (uint8 HxWx3 image, uint8 labels)."""
    if width < 16 or height < 16:
        raise ParameterError("dense scenes need width and height >= 16")
    img = np.zeros((height, width, 3))
    labels = np.full((height, width), VOID, dtype=np.uint8)
    horizon = int(height * gen.uniform(0.38, 0.55))

    # sky with a vertical gradient
    sky = np.array(palette.colors[palette.id_of("sky")], dtype=float)
    t = np.linspace(0.0, 1.0, max(horizon, 1))[:, None, None]
    img[:horizon] = sky * (0.85 + 0.35 * t)
    labels[:horizon] = palette.id_of("sky")

    # buildings standing on the horizon line
    bcol = np.array(palette.colors[palette.id_of("building")], dtype=float)
    for _ in range(_count(gen, 2, 4)):
        bw = int(width * gen.uniform(0.15, 0.35))
        x0 = int(gen.integers(0, max(1, width - bw)))
        y0 = int(horizon * gen.uniform(0.15, 0.75))
        shade = gen.uniform(0.75, 1.2)
        block = np.tile(bcol * shade, (horizon - y0, bw, 1))
        block[::3] *= 0.93                      # faint floor striping
        img[y0:horizon, x0:x0 + bw] = block
        labels[y0:horizon, x0:x0 + bw] = palette.id_of("building")

    # optional fence strip in the wide palette
    if "fence" in palette.names and gen.random() < 0.6:
        fh = max(2, height // 16)
        fcol = np.array(palette.colors[palette.id_of("fence")], dtype=float)
        x0 = int(gen.integers(0, width // 2))
        x1 = int(gen.integers(x0 + width // 4, width + 1))
        img[horizon:horizon + fh, x0:x1] = fcol * gen.uniform(0.85, 1.1)
        labels[horizon:horizon + fh, x0:x1] = palette.id_of("fence")

    # sidewalk fills the ground; the road trapezoid is carved on top
    scol = np.array(palette.colors[palette.id_of("sidewalk")], dtype=float)
    ground = labels[horizon:] == VOID
    img[horizon:][ground] = scol * gen.uniform(0.9, 1.1)
    labels[horizon:][ground] = palette.id_of("sidewalk")

    rcol = np.array(palette.colors[palette.id_of("road")], dtype=float)
    center = width * gen.uniform(0.4, 0.6)
    drift = width * gen.uniform(-0.15, 0.15)
    w_top, w_bot = width * gen.uniform(0.1, 0.2), width * gen.uniform(0.7, 0.95)
    road_edges = []
    for row in range(horizon, height):
        frac = (row - horizon) / max(1, height - 1 - horizon)
        half = 0.5 * (w_top + (w_bot - w_top) * frac)
        mid = center + drift * frac
        l, r = int(mid - half), int(mid + half)
        l, r = max(0, l), min(width, r)
        road_edges.append((l, r))
        img[row, l:r] = rcol * gen.uniform(0.92, 1.05)
        labels[row, l:r] = palette.id_of("road")
        if (row - horizon) % 4 < 2 and r - l > 4:   # dashed center line
            img[row, int(mid)] = (210, 205, 190)

    # vegetation blobs near the horizon
    vcol = np.array(palette.colors[palette.id_of("vegetation")], dtype=float)
    for _ in range(_count(gen, 1, 3)):
        ry = max(2, int(height * gen.uniform(0.04, 0.1)))
        rx = int(ry * gen.uniform(1.0, 2.0))
        cy = horizon + int(gen.integers(0, max(1, height // 8)))
        cx = int(gen.integers(0, width))
        yy, xx = np.ogrid[:height, :width]
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[blob] = vcol * gen.uniform(0.8, 1.15)
        labels[blob] = palette.id_of("vegetation")

    def position(name, ph, pw):
        lo = horizon + max(1, (height - horizon) // 6)
        row = int(gen.integers(lo, max(lo + 1, height - 2)))
        top = row - ph
        edge_idx = min(len(road_edges) - 1, max(0, row - horizon))
        l, r = road_edges[edge_idx]
        if name in ("car", "cyclist") and r - l > pw + 2:
            left = int(gen.integers(l, max(l + 1, r - pw)))
        elif name in ("sign", "pole"):
            side = l - pw - 1 if gen.random() < 0.5 else r + 1
            left = int(np.clip(side, 0, max(0, width - pw)))
            top = row - ph - max(1, ph // 3)    # mounted above the ground line
        else:
            side = (int(gen.integers(0, max(1, l + 1)))
                    if gen.random() < 0.5 else int(gen.integers(min(r, width - 1), width)))
            left = int(np.clip(side - pw // 2, 0, max(0, width - pw)))
        return max(horizon - ph // 2, top), left

    _place_objects(gen, img, labels, palette, _count(gen, *objects), position,
                   max_cover=0.3)

    img += gen.normal(0.0, 6.0, size=img.shape)
    img *= gen.uniform(0.88, 1.12)
    return np.clip(img, 0, 255).astype(np.uint8), labels


def generate_sparse_scene(gen, palette: Palette, width: int, height: int,
                          objects=(1, 6)):
    """Cluttered scene with only object pixels labeled (background void)."""
    if objects[0] < 1:
        raise ParameterError("sparse scenes need at least one object")
    img = np.tile(gen.uniform(70, 190, size=3), (height, width, 1))
    labels = np.full((height, width), VOID, dtype=np.uint8)
    for _ in range(_count(gen, 8, 14)):          # unlabeled clutter
        col = gen.uniform(40, 215, size=3)
        col = 0.6 * col + 0.4 * col.mean()       # desaturate
        ch = int(gen.integers(height // 8, height // 2))
        cw = int(gen.integers(width // 8, width // 2))
        y0 = int(gen.integers(0, max(1, height - ch)))
        x0 = int(gen.integers(0, max(1, width - cw)))
        if gen.random() < 0.5:
            img[y0:y0 + ch, x0:x0 + cw] = col
        else:
            yy, xx = np.ogrid[:height, :width]
            blob = (((yy - (y0 + ch / 2)) / (ch / 2)) ** 2
                    + ((xx - (x0 + cw / 2)) / (cw / 2)) ** 2) <= 1.0
            img[blob] = col

    def position(name, ph, pw):
        top = int(gen.integers(0, max(1, height - ph)))
        left = int(gen.integers(0, max(1, width - pw)))
        return top, left

    _place_objects(gen, img, labels, palette, _count(gen, *objects), position,
                   max_cover=0.35)
    img += gen.normal(0.0, 8.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), labels


def generate_unlabeled_scene(gen, palette: Palette, width: int, height: int,
                             objects=(2, 6)):
    """Dense-style scene without annotations (transfer-set imagery)."""
    img, _ = generate_dense_scene(gen, palette, width, height, objects=objects)
    return img


def flying_cars_composite(gen, palette: Palette, image, labels,
                          objects=(1, 3)):
    """Paste freshly rendered objects into an existing dense scene.

    Cars and cyclists land on road pixels, pedestrians on sidewalk, signs and
    poles near either; falls back to the lower image half when a fitting spot
    is not found.  Returns new (image, labels) arrays.
    """
    img = np.asarray(image, dtype=np.float64).copy()
    labels = np.asarray(labels).copy()
    height, width = labels.shape
    surface = {"car": ("road",), "cyclist": ("road",),
               "pedestrian": ("sidewalk",), "sign": ("road", "sidewalk"),
               "pole": ("road", "sidewalk")}

    def position(name, ph, pw):
        wanted = [palette.id_of(s) for s in surface.get(name, ())
                  if s in palette.names]
        for _ in range(10):
            row = int(gen.integers(height // 3, height))
            left = int(gen.integers(0, max(1, width - pw)))
            foot = labels[min(row, height - 1),
                          min(left + pw // 2, width - 1)]
            if not wanted or foot in wanted:
                return row - ph, left
        return int(gen.integers(height // 2, height)) - ph, \
            int(gen.integers(0, max(1, width - pw)))

    _place_objects(gen, img, labels, palette, _count(gen, *objects), position,
                   max_cover=0.4)
    return np.clip(img, 0, 255).astype(np.uint8), labels
