import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dcpt.data import save_image  # noqa: E402
from dcpt.keyframes import FrameIndexReport  # noqa: E402


def make_corpus(root, n_real=3, n_fake=3, n_frames=12, key_every=6, size=32, seed=0, splits=None):
    """Frames under root/videos, labels.json and one keyframe report per video.

    Real videos are dark with a bright square, fake ones bright with a dark
    square, so a classifier can separate them.
    """
    root = Path(root)
    gen = np.random.default_rng(seed)
    labels, report_paths = {}, []
    (root / "reports").mkdir(parents=True, exist_ok=True)
    vids = [(f"real{i:02d}", 0) for i in range(n_real)] + [(f"fake{i:02d}", 1) for i in range(n_fake)]
    for n, (vid, label) in enumerate(vids):
        vdir = root / "videos" / vid
        vdir.mkdir(parents=True)
        for f in range(n_frames):
            img = gen.uniform(0.0, 0.2, (3, size, size)) if label == 0 else gen.uniform(0.8, 1.0, (3, size, size))
            r, c = gen.integers(0, size // 2, 2)
            img[:, r : r + size // 4, c : c + size // 4] = 1.0 - img[:, r : r + size // 4, c : c + size // 4]
            save_image(vdir / f"{f}.png", img)
        kinds = ["I" if f % key_every == 0 else "nonI" for f in range(n_frames)]
        rep = FrameIndexReport(f"{vid}.mp4", list(enumerate(kinds)))
        p = root / "reports" / f"{vid}.jsonl"
        p.write_text(rep.to_jsonl())
        report_paths.append(p)
        split = splits(n, label) if splits else "train"
        labels[vid] = {"label": "real" if label == 0 else "fake", "split": split}
    (root / "labels.json").write_text(json.dumps(labels))
    return root


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path / "corpus")


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
