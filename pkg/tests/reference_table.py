"""Reference accuracy table: raw values and the printed delta annotations."""

KEYS = ("tp", "fn", "precision", "recall", "map50", "mean_iou")

TABLE2 = [
    ("TF-Net", (82, 18, 95.7, 77.4, 84, 44.8)),
    ("YOLOv5n", (80, 20, 92.3, 76, 80.5, 43.5)),
    ("YOLOv5s", (81, 19, 93.1, 78.4, 80.3, 43.4)),
    ("YOLOv5m", (83, 17, 91.2, 78.1, 83.6, 43.3)),
    ("YOLOv5l", (77, 23, 90.8, 75.3, 82.9, 42.2)),
]

# cell text as printed, deltas against the TF-Net row
ANNOTATIONS = {
    "YOLOv5n": ["80 (↓ 2)", "20 (↑ 2)", "92.3 (↓ 3.4)", "76 (↓ 1.4)", "80.5 (↓ 3.5)", "43.5 (↓ 1.3)"],
    "YOLOv5s": ["81 (↓ 1)", "19 (↑ 1)", "93.1 (↓ 2.6)", "78.4 (↑ 1)", "80.3 (↓ 3.7)", "43.4 (↓ 1.4)"],
    "YOLOv5m": ["83 (↑ 1)", "17 (↓ 1)", "91.2 (↓ 4.5)", "78.1 (↑ 0.7)", "83.6 (↓ 0.4)", "43.3 (↓ 1.5)"],
    "YOLOv5l": ["77 (↓ 5)", "23 (↑ 5)", "90.8 (↓ 4.9)", "75.3 (↓ 2.1)", "82.9 (↓ 1.1)", "42.2 (↓ 2.6)"],
}


def rows():
    return [dict(zip(KEYS, v)) for _, v in TABLE2], [n for n, _ in TABLE2]
