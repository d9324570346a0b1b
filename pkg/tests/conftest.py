import numpy as np
import pytest

from cxsearch.imaging import RgbImage, encode_png


def solid(h: int, w: int, rgb=(128, 128, 128)) -> RgbImage:
    return RgbImage(np.broadcast_to(np.array(rgb, dtype=np.uint8), (h, w, 3)).copy())


def vertical_step(h: int = 64, w: int = 64) -> RgbImage:
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, w // 2 :] = 255
    return RgbImage(px)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def png_bytes():
    def make(img: RgbImage) -> bytes:
        return encode_png(img)

    return make


# -- a small end-to-end world: codebook, per-category databases, scene image --

WORLD_K = 48
WORLD_CATEGORIES = {"top": (0, 1), "jacket": (4, 5), "dress": (6, 7)}  # category -> texture classes


class World:
    def __init__(self, root):
        from cxsearch.descriptor import describe_image
        from cxsearch.index import build_shards, write_shards
        from cxsearch.localiser import BBox, Detection, save_detections
        from cxsearch.signature import quantize, train_codebook
        from cxsearch.synthetic import texture_image

        rng = np.random.default_rng(2024)
        self.root = root
        self.images: dict[str, list[tuple[int, RgbImage]]] = {}
        descs = []
        next_id = 100
        for cat, classes in WORLD_CATEGORIES.items():
            items = []
            for c in classes:
                for _ in range(4):
                    img = texture_image(c, rng, size=(64, 64))
                    items.append((next_id, img))
                    descs.append(describe_image(img))
                    next_id += 1
            self.images[cat] = items
        self.codebook = train_codebook(np.concatenate(descs), k=WORLD_K, seed=0)
        self.codebook.save(root / "codebook.cxcb")
        lines = []
        self.signatures = {}
        for cat, items in self.images.items():
            sigs = [(i, quantize(describe_image(img), self.codebook)) for i, img in items]
            self.signatures[cat] = sigs
            manifest = write_shards(build_shards(sigs, WORLD_K, 3), WORLD_K, root / cat)
            lines.append(f"{cat}\t{manifest.relative_to(root)}\tcodebook.cxcb")
        self.registry_path = root / "databases.tsv"
        self.registry_path.write_text("\n".join(lines) + "\n")

        # scene: the first indexed top (left) next to the first indexed jacket (right)
        top_id, top_img = self.images["top"][0]
        jacket_id, jacket_img = self.images["jacket"][0]
        self.scene = RgbImage(np.concatenate([top_img.pixels, jacket_img.pixels], axis=1))
        self.expected_ids = {"top": top_id, "jacket": jacket_id}
        self.scene_detections = [
            Detection("top", 0.9, BBox(0, 0, 64, 64)),
            Detection("jacket", 0.8, BBox(64, 0, 64, 64)),
        ]
        self.blank = solid(64, 64, (200, 200, 200))
        self.fixture_path = root / "fixtures.json"
        save_detections(self.fixture_path, {self.scene.content_hash(): self.scene_detections, self.blank.content_hash(): []})


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    return World(tmp_path_factory.mktemp("world"))


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
