import numpy as np
import pytest
import torch

from accident_anticipation.data_model import NEGATIVE, POSITIVE, DatasetManifest, FeatureBundle, VideoSample


def random_bundle(T=5, N=19, F=32, seed=0, present=(4, 12)) -> FeatureBundle:
    rng = np.random.default_rng(seed)
    scores = np.zeros((T, N))
    k = rng.integers(present[0], present[1] + 1)
    scores[:, rng.choice(N, size=k, replace=False)] = rng.uniform(0.3, 1.0, size=(T, k))
    on = scores > 0
    lo = rng.uniform(0, 1000, size=(T, N, 2))
    hi = lo + rng.uniform(5, 200, size=(T, N, 2))
    boxes = np.concatenate([lo, hi], axis=-1) * on[..., None]
    return FeatureBundle(
        frame_feat=rng.normal(size=(T, F)),
        obj_feat=rng.normal(size=(T, N, F)) * on[..., None],
        boxes=boxes,
        scores=scores,
        obj_depth=rng.uniform(2, 80, size=(T, N)) * on,
        width=1280,
        height=720,
    )


def make_manifest(n_pos, n_neg, n_test_pos=0, n_test_neg=0, toa=30, T=50) -> DatasetManifest:
    samples, train, test = [], [], []
    for i in range(n_pos + n_test_pos):
        s = VideoSample(f"p{i:05d}", POSITIVE, toa, 20, T, f"p{i}.accf")
        samples.append(s)
        (train if i < n_pos else test).append(s.id)
    for i in range(n_neg + n_test_neg):
        s = VideoSample(f"n{i:05d}", NEGATIVE, -1, 20, T, f"n{i}.accf")
        samples.append(s)
        (train if i < n_neg else test).append(s.id)
    return DatasetManifest("toy", tuple(samples), {"train": tuple(train), "test": tuple(test)})


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


# -- acceptance reporting ----------------------------------------------------
# Tests marked ``criterion(n)`` are grouped; a criterion passes when all of its tests pass.
# Titles come from the test module's CRITERIA table.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    (number,) = mark.args
    title = getattr(item.module, "CRITERIA", {}).get(number, "")
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["notes"].append(f"{item.name} failed")
    for key, value in getattr(item, "user_properties", []):
        entry["notes"].append(f"{key}={value}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}{notes}")
