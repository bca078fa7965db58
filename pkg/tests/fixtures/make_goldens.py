"""Regenerate goldens.json with a plain-python bilinear resampler.

Deliberately shares no code with the package: every output pixel (x, y) reads
the source point given by the inverse map below, mixing its four neighbours
with bilinear weights and treating anything outside the image as 0.

    python tests/fixtures/make_goldens.py
"""
import json
import math
from pathlib import Path

SIDE = 4


def ramp():
    return [[(SIDE * y + x) / (SIDE * SIDE - 1) for x in range(SIDE)] for y in range(SIDE)]


def sample(img, sx, sy):
    x0, y0 = math.floor(sx), math.floor(sy)
    fx, fy = sx - x0, sy - y0
    total = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            if 0 <= yi < SIDE and 0 <= xi < SIDE:
                total += wx * wy * img[yi][xi]
    return min(max(total, 0.0), 1.0)


def resample(img, inverse):
    return [[sample(img, *inverse(x, y)) for x in range(SIDE)] for y in range(SIDE)]


C = (SIDE - 1) / 2.0  # centre of a 4x4 image in pixel coordinates


def shear_x(r):
    return lambda x, y: (x + r * (y - C), y)


def shear_y(r):
    return lambda x, y: (x, y + r * (x - C))


def rotate(deg):
    t = math.radians(deg)
    # counter-clockwise on screen (y points down), PIL's convention
    return lambda x, y: (C + math.cos(t) * (x - C) - math.sin(t) * (y - C),
                         C + math.sin(t) * (x - C) + math.cos(t) * (y - C))


def translate_x(frac):
    return lambda x, y: (x - frac * SIDE, y)


def translate_y(frac):
    return lambda x, y: (x, y - frac * SIDE)


CASES = [
    ("ShearX", 0.3, shear_x(0.3)),
    ("ShearX", -0.2, shear_x(-0.2)),
    ("ShearY", 0.3, shear_y(0.3)),
    ("Rotate", 30.0, rotate(30.0)),
    ("Rotate", -12.5, rotate(-12.5)),
    ("Rotate", 90.0, rotate(90.0)),
    ("TranslateX", 0.25, translate_x(0.25)),
    ("TranslateX", -0.3, translate_x(-0.3)),
    ("TranslateY", 0.3, translate_y(0.3)),
]


def main():
    img = ramp()
    out = {"input": img, "cases": [{"transform": n, "magnitude": m, "expected": resample(img, f)}
                                    for n, m, f in CASES]}
    path = Path(__file__).with_name("goldens.json")
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {len(CASES)} cases to {path}")


if __name__ == "__main__":
    main()
