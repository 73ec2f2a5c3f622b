"""Fixture builders shared by several test modules."""

from collections import deque

import numpy as np

from surgseg_eval.masks import rle_encode, rle_to_string


def flood_fill_count(arr):
    """4-connected component count by explicit BFS (independent of scipy)."""
    arr = np.asarray(arr, dtype=bool)
    h, w = arr.shape
    seen = np.zeros_like(arr)
    n = 0
    for y in range(h):
        for x in range(w):
            if arr[y, x] and not seen[y, x]:
                n += 1
                q = deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                        if 0 <= ny < h and 0 <= nx < w and arr[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
    return n


def crafted_coco(num_videos=3, num_frames=4, width=10, height=8):
    """Two classes per video: class 1 as RLE (list or compressed string), class 2 as polygon."""
    images, anns = [], []
    iid = aid = 0
    for v in range(num_videos):
        for f in range(num_frames):
            iid += 1
            images.append({"id": iid, "file_name": f"v{v}/{f:05d}.png", "width": width, "height": height,
                           "video_id": f"vid{v}", "frame_index": f})
            arr = np.zeros((height, width), dtype=bool)
            arr[1 + (f % 2):4, 1 + v:4 + v] = True
            counts = rle_encode(arr)
            aid += 1
            anns.append({"id": aid, "image_id": iid, "category_id": 1, "object_id": 0,
                         "segmentation": {"size": [height, width],
                                          "counts": rle_to_string(counts) if v == 1 else counts}})
            if f != 2:  # object 1 leaves on frame 2
                x0 = 5 + (f % 2)
                aid += 1
                anns.append({"id": aid, "image_id": iid, "category_id": 2, "object_id": 1,
                             "segmentation": [[x0, 4, x0 + 3, 4, x0 + 3, 7, x0, 7]],
                             "bbox": [x0, 4, 4, 4]})
    return {"images": images, "annotations": anns,
            "categories": [{"id": 1, "name": "instrument"}, {"id": 2, "name": "tissue"}]}


def write_pixel_mask_dataset(root, rng, num_videos=2, num_frames=3, width=24, height=20):
    """Random blob label images (PNG) plus a palette; returns (palette path, label arrays)."""
    from PIL import Image

    values = {1: 60, 2: 120, 3: 200}
    root.mkdir(parents=True, exist_ok=True)
    palette = root / "palette.txt"
    palette.write_text("0 = background\n60 = 1 grasper\n120 = 2 hook\n200 = 3 liver\n")
    labels = {}
    for v in range(num_videos):
        vdir = root / f"video{v:02d}"
        (vdir / "images").mkdir(parents=True)
        (vdir / "masks").mkdir()
        for f in range(num_frames):
            lab = np.zeros((height, width), dtype=np.uint8)
            for _ in range(5):
                cls = int(rng.integers(1, 4))
                y, x = rng.integers(0, height - 4), rng.integers(0, width - 4)
                hh, ww = rng.integers(1, 5, size=2)
                lab[y:y + hh, x:x + ww] = values[cls]
            Image.fromarray(np.full((height, width, 3), 90, np.uint8)).save(vdir / "images" / f"{f:04d}.jpg")
            if f != 1:  # middle frame unannotated
                Image.fromarray(lab).save(vdir / "masks" / f"{f:04d}.png")
                labels[(f"video{v:02d}", f)] = lab
    return palette, labels
