"""Synthetic interaction-log generator for demos and integration tests.

Produces a desk-scale world with learnable structure: items belong to
genres, and each user mostly walks a ring inside a home genre with
occasional jumps. Emits the raw TSV the prepare command ingests plus a
genre label file for the linear probe. Purely synthetic; no relation to
any public dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

GENRE_NAMES = [
    "Ambient", "Baroque", "Chiptune", "Dub", "Electro", "Folk", "Grime",
    "House", "IDM", "Jazz", "Klezmer", "Lo-fi", "Metal",
]


def generate_demo_logs(out_dir: str | Path, n_users: int = 240, n_items: int = 60,
                       n_genres: int = 6, min_len: int = 8, max_len_seq: int = 30,
                       stay_prob: float = 0.8, seed: int = 7) -> tuple[Path, Path]:
    """Write interactions.tsv and genre_labels.tsv; returns their paths."""
    if n_genres > len(GENRE_NAMES):
        raise ValueError(f"at most {len(GENRE_NAMES)} genres supported")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_genre = n_items // n_genres
    genre_of = np.repeat(np.arange(n_genres), per_genre)
    genre_of = np.concatenate([genre_of, rng.integers(0, n_genres, n_items - len(genre_of))])

    def ring_next(item: int) -> int:
        g = genre_of[item]
        members = np.nonzero(genre_of == g)[0]
        pos = int(np.nonzero(members == item)[0][0])
        return int(members[(pos + 1) % len(members)])

    log_path = out_dir / "interactions.tsv"
    t = 1_000_000
    with open(log_path, "w") as f:
        for u in range(n_users):
            home = rng.integers(0, n_genres)
            members = np.nonzero(genre_of == home)[0]
            item = int(rng.choice(members))
            length = int(rng.integers(min_len, max_len_seq + 1))
            for _ in range(length):
                f.write(f"user{u:04d}\titem{item:04d}\t{t}\n")
                t += 1
                if rng.random() < stay_prob:
                    item = ring_next(item)
                else:
                    item = int(rng.integers(0, n_items))

    labels_path = out_dir / "genre_labels.tsv"
    with open(labels_path, "w") as f:
        for item in range(n_items):
            f.write(f"item{item:04d}\t{GENRE_NAMES[genre_of[item]]}\n")
    return log_path, labels_path
