"""Writes the canned backend replies used by the transcript tests.

Pixel (x, y) of the generated patch is (x * 30, y * 30, (x + y) % 2 * 255).
"""
import base64
import io
import json

from PIL import Image


def png_b64(img):
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def patch(size):
    img = Image.new("RGB", (size, size))
    for y in range(size):
        for x in range(size):
            img.putpixel((x, y), (x * 30, y * 30, (x + y) % 2 * 255))
    return img


def write(name, lines):
    with open(name, "w") as f:
        for line in lines:
            f.write(json.dumps(line, separators=(",", ":")) + "\n")


write("generator_replies.ndjson", [
    {"op": "hello_ack", "role": "generator", "version": 1},
    {"op": "result", "id": 0, "patch_png": png_b64(patch(8))},
    {"op": "error", "id": 1, "message": "out of memory"},
    {"op": "result", "id": 2, "patch_png": png_b64(patch(6))},
])

write("detector_replies.ndjson", [
    {"op": "hello_ack", "role": "detector", "version": 1},
    {"op": "detections", "id": 0, "items": [
        {"x_min": 1.0, "y_min": 2.0, "x_max": 5.5, "y_max": 6.0, "confidence": 0.875, "label": "car"},
        {"x_min": 0.0, "y_min": 0.0, "x_max": 8.0, "y_max": 8.0, "confidence": 0.25, "label": "car"},
    ]},
    {"op": "detections", "id": 1, "items": []},
    {"op": "detections", "id": 7, "items": []},
])

write("wrong_role_replies.ndjson", [
    {"op": "hello_ack", "role": "detector", "version": 1},
])

write("wrong_version_replies.ndjson", [
    {"op": "hello_ack", "role": "generator", "version": 2},
])

with open("garbage_replies.ndjson", "w") as f:
    f.write(json.dumps({"op": "hello_ack", "role": "detector", "version": 1}) + "\n")
    f.write("this is not json\n")
