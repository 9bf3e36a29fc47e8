"""Reference masking outcomes for the fixture cases, computed with numpy.

Writes tests/fixtures/mask_embeddings.txt and mask_cases.jsonl under
crates/core. Run from the repository root:

    python3 scripts/oracles/masking_oracle.py
"""
import json
import re
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[2]
CORE = ROOT / "crates" / "core"
OUT = CORE / "tests" / "fixtures"
UNK = "<unk>"

VOCAB = {
    "joy": [1, 0, 0, 0],
    "happy": [0.9, 0.2, 0, 0],
    "glad": [0.9, 0.2, 0, 0],
    "delighted": [0.8, 0.1, 0.1, 0],
    "anger": [0, 1, 0, 0],
    "furious": [0.1, 0.9, 0, 0.1],
    "angry": [0, 0.95, 0.05, 0],
    "sports": [0, 0, 1, 0],
    "football": [0, 0.1, 0.9, 0.1],
    "match": [0.1, 0, 0.8, 0.3],
    "business": [0, 0, 0, 1],
    "market": [0, 0.1, 0.1, 0.9],
    "stocks": [0.1, 0, 0, 0.95],
    "science": [0.5, 0, 0.5, 0],
    "technology": [0.4, 0, 0.4, 0.4],
    "computer": [0.3, 0.1, 0.3, 0.5],
    "world": [0.25, 0.25, 0.25, 0.25],
    "news": [0.2, 0.2, 0.3, 0.3],
    "table": [-0.2, 0.1, -0.3, 0.2],
    "paper": [0.1, 0.4, -0.2, 0.3],
    "the": [1, 0, 0, 0],
    "and": [0, 0, 1, 0],
    "other": [0.3, 0.3, 0.3, -0.5],
    "it": [0.7, 0.7, 0, 0],
    "don't": [0, 0.6, 0, 0.2],
    "unk": [1, 0, 0, 0],
}

# (text, class)
CASES = [
    ("I feel joy and happy thoughts", "joy"),
    ("Happy happy joy", "anger"),
    ("so glad and happy today", "joy"),
    ("The FOOTBALL match was great!", "sports"),
    ("...stocks, market; and news", "business"),
    ("the and it", "joy"),
    ("zzz qqq xyzzy", "sports"),
    ("furious about the angry crowd", "anger"),
    ("a computer on the table", "science and technology"),
    ("world news on the paper", "world news"),
    ("the other table paper", "other"),
    ("<unk> joy happy", "joy"),
    ("pre<unk>joy happy", "joy"),
    ("football, match! sports?", "sports"),
    ("joy", "joy"),
    ("market stocks", "sports"),
    ("(delighted) and glad", "joy"),
    ("I don't care about paper", "anger"),
    ("technology news paper", "science"),
    ("happy paper", "qwerty"),
]


def load_stopwords():
    words = (CORE / "data" / "stopwords.txt").read_text().split("\n")
    return {w.strip().lower() for w in words if w.strip()}


STOP = load_stopwords()
VEC = {k: np.array(v, dtype=float) for k, v in VOCAB.items()}


def tokens(text):
    out = []
    for m in re.finditer(r"\S+", text):
        chunk = m.group(0)
        inner = re.search(r"[^\W_].*[^\W_]|[^\W_]", chunk)
        if inner is None:
            continue
        out.append((inner.group(0), m.start() + inner.start(), m.start() + inner.end(), chunk))
    return out


def content(text):
    return [(t, s, e, c) for t, s, e, c in tokens(text) if t.lower() not in STOP and t.lower() in VEC]


def class_vector(name):
    words = [t.lower() for t, *_ in content(name)]
    if not words:
        words = [t.lower() for t, *_ in tokens(name) if t.lower() in VEC]
    if not words:
        return None
    return np.mean([VEC[w] for w in words], axis=0)


def cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def mask(text, cls):
    cv = class_vector(cls)
    if cv is None:
        return None
    cands = [(t, s, e) for t, s, e, c in content(text) if UNK not in c]
    if not cands:
        return None
    sims = np.array([cos(VEC[t.lower()], cv) for t, _, _ in cands])
    i = int(np.argmax(sims))  # first maximum
    t, s, e = cands[i]
    return {"token": t, "start": s, "end": e, "similarity": float(sims[i]), "masked_text": text[:s] + UNK + text[e:]}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "mask_embeddings.txt", "w") as f:
        for w, v in VOCAB.items():
            f.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")
    with open(OUT / "mask_cases.jsonl", "w") as f:
        for text, cls in CASES:
            f.write(json.dumps({"text": text, "class": cls, "expected": mask(text, cls)}) + "\n")


if __name__ == "__main__":
    main()
