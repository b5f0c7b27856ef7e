"""Minimal binary PGM (P5) raster I/O for segmentation masks.

Class-index rasters map to gray levels cyclonic -> 0, background -> 128,
anticyclonic -> 255.
"""

import numpy as np

GRAY_BACKGROUND = 128
GRAY_ANTICYCLONIC = 255
GRAY_CYCLONIC = 0
_CLASS_TO_GRAY = np.array([GRAY_BACKGROUND, GRAY_ANTICYCLONIC, GRAY_CYCLONIC],
                          dtype=np.uint8)


def classes_to_gray(classes):
    classes = np.asarray(classes)
    if not np.isin(classes, (0, 1, 2)).all():
        raise ValueError("class indices must be 0, 1 or 2")
    return _CLASS_TO_GRAY[classes]


def write_pgm(path, image):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM image must be a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path}: not a maxval-255 P5 file")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos:]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
