import os

import numpy as np
import pytest

from lunar_restore.mosaic_io import write_image
from lunar_restore.stripes import StripeTemplate, save_templates
from lunar_restore.synthetic import crater_field


def make_clean_dir(path, n, size=64, seed0=0):
    os.makedirs(path, exist_ok=True)
    for i in range(n):
        write_image(crater_field(size, size, seed0 + i), os.path.join(path, f"crater_{i:03d}.png"))
    return path


DESK_TEMPLATES = [
    StripeTemplate(((0, 1, 0.0, 1.0),)),
    StripeTemplate(((0, 1, 0.0, 0.5), (9, 1, 0.5, 1.0))),
    StripeTemplate(((0, 1, 0.1, 0.7),)),
]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def clean_dir(tmp_path):
    return make_clean_dir(str(tmp_path / "clean"), 6, size=72)


@pytest.fixture
def template_file(tmp_path):
    path = str(tmp_path / "templates.json")
    save_templates(DESK_TEMPLATES, path)
    return path


@pytest.fixture
def small_dataset(tmp_path, clean_dir, template_file):
    from lunar_restore.dataset import build_dataset

    return build_dataset(clean_dir, template_file, 6, 3, 3, 11, str(tmp_path / "ds"), crop_size=32, max_coverage=0.05)


# acceptance results, printed one line per criterion at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(number, name, ok, detail):
        ACCEPTANCE[number] = (name, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} | {detail}")
