"""Smoke test for the clothdiff extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
Run:                      python python/smoke_test.py   (or pytest python/)
"""

import json
import math
import tempfile
from pathlib import Path

import clothdiff


def test_mesh_and_metrics():
    m = clothdiff.ClothMesh.grid(4, 4, 0.1)
    assert m.n_vertices == 16 and len(m.faces) == 18
    back = clothdiff.ClothMesh.from_obj(m.to_obj())
    assert back.vertices == m.vertices and back.faces == m.faces
    moved = m.with_vertices([(x + 0.1, y, z) for x, y, z in m.vertices])
    assert math.isclose(clothdiff.mse(m, moved), 0.01, rel_tol=1e-9)
    assert clothdiff.chamfer(m.vertices, m.vertices) == 0.0
    assert clothdiff.emd(m.vertices, m.vertices) == 0.0


def test_simulate_and_observe():
    m = clothdiff.ClothMesh.grid(4, 4, 0.08)
    sim = clothdiff.Simulator(m, json.dumps({"gravity": -9.81}))
    states = sim.rollout(m, [(0, (0.0, 0.0, 0.02))] * 5)
    assert len(states) == 5
    assert states[-1].vertices[0][2] > 0.05
    cloud = clothdiff.observe(states[-1], seed=1, n_points=64)
    assert len(cloud) == 64


def test_schedule():
    s = clothdiff.NoiseSchedule(50)
    abar = [s.alpha_bar(k) for k in range(1, s.steps + 1)]
    assert all(a > b for a, b in zip(abar, abar[1:]))


def test_gen_data_is_deterministic():
    with tempfile.TemporaryDirectory() as d:
        cfg = json.dumps({"n_records": 1, "cloth": {"rows": 4, "cols": 4, "spacing": 0.08}})
        a = json.loads(clothdiff.gen_data(str(Path(d) / "a"), cfg))
        clothdiff.gen_data(str(Path(d) / "b"), cfg)
        assert len(a["records"]) == 1
        name = "traj00000_states.cdt"
        assert (Path(d) / "a" / name).read_bytes() == (Path(d) / "b" / name).read_bytes()


def test_planner_and_gradcheck():
    assert clothdiff.point_mass() < 0.02
    emd = clothdiff.fold_episode(rows=4, cols=4, max_steps=1, planner=json.dumps({"n_samples": 8, "n_iterations": 2}))
    assert len(emd) >= 2 and emd[0] > 0.0
    assert all(ok for _, _, ok in clothdiff.gradcheck("ops"))


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
