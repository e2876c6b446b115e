"""Regenerate the tiny20 fixture: 20 documents, local images, mock heads.

Run from this directory: python3 generate.py
"""

import json
import random
import struct
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).resolve().parent
IMAGES = HERE / "images"
HEADS = HERE / "heads"
DIM = 64

TOPICS = [
    ("garden", ["tomatoes", "basil", "compost", "trellis", "seedlings"]),
    ("kitchen", ["dough", "oven", "skillet", "garlic", "broth"]),
    ("cycling", ["saddle", "chain", "climb", "helmet", "descent"]),
    ("travel", ["harbor", "train", "museum", "market", "ferry"]),
    ("woodwork", ["chisel", "dovetail", "walnut", "clamp", "varnish"]),
]

TEMPLATES = [
    "We started the morning with the {w}.",
    "The {w} turned out better than expected.",
    "Nobody had warned us about the {w}.",
    "Here is a close look at the {w} after an hour.",
    "A neighbor stopped by to ask about the {w}.",
    "The light was perfect for photographing the {w}.",
    "By noon the {w} needed attention again.",
    "I would change one thing about the {w} next time.",
    "It took three tries to get the {w} right.",
    "The final {w} is shown below.",
]


def textured(seed, width, height):
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(6, 8, 3), dtype=np.uint8)
    return Image.fromarray(coarse, "RGB").resize((width, height), Image.NEAREST)


def save(img, name):
    path = IMAGES / name
    if name.endswith(".jpg"):
        img.save(path, quality=90)
    else:
        img.save(path)
    return f"images/{name}"


def head(path, name, weights, bias):
    with open(path, "wb") as f:
        f.write(b"MMHD")
        f.write(struct.pack("<I", 1))
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<BB", 1, 1))
        f.write(struct.pack("<II", 1, len(weights)))
        f.write(struct.pack(f"<{len(weights)}f", *weights))
        f.write(struct.pack("<f", bias))


def main():
    IMAGES.mkdir(exist_ok=True)
    HEADS.mkdir(exist_ok=True)
    rng = random.Random(7)

    spacer = save(textured(9000, 320, 240), "shared_banner.png")
    save(textured(1, 100, 100), "thumb.png")
    save(textured(2, 1000, 300), "panorama.png")
    save(textured(3, 1600, 800), "wide_ok.png")
    (IMAGES / "corrupt.png").write_bytes(b"this is not an image")

    lines = []
    for d in range(20):
        topic, words = TOPICS[d % len(TOPICS)]
        n_sent = 4 + (d * 3) % 9
        sentences = [rng.choice(TEMPLATES).format(w=rng.choice(words)) for _ in range(n_sent)]
        refs = []
        for i in range(1 + d % 4):
            ext = "jpg" if (d + i) % 3 == 0 else "png"
            w, h = rng.choice([(400, 300), (300, 400), (640, 480), (500, 500), (360, 240)])
            refs.append(save(textured(100 * d + i, w, h), f"d{d:02d}_{i}.{ext}"))
        if d < 12:
            refs.append(spacer)
        if d == 1:
            refs.append(refs[0])
        if d == 2:
            refs += ["images/thumb.png", "images/panorama.png", "images/wide_ok.png"]
        if d == 3:
            refs += ["images/site_logo.png", "images/anim.gif", "images/missing.png", "images/corrupt.png"]
        record = {"url": f"https://www.example{d % 6}.org/{topic}/post-{d}", "image_urls": refs}
        if d % 2 == 0:
            record["text"] = " ".join(sentences)
        else:
            record["text_list"] = sentences
            record["doc_id"] = f"doc-{d:02d}"
        lines.append(json.dumps(record))
    lines.insert(7, '{"url": "https://broken.example/x", "text": "no images field"}')
    lines.insert(13, "{not json")
    (HERE / "manifest.jsonl").write_text("\n".join(lines) + "\n")

    wrng = np.random.default_rng(11)
    head(HEADS / "nsfw.mmhd", "nsfw", wrng.normal(0, 1, DIM).tolist(), -3.0)
    head(HEADS / "face.mmhd", "face", wrng.normal(0, 2, DIM).tolist(), 0.0)


if __name__ == "__main__":
    main()
