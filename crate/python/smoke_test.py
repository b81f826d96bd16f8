"""Smoke test for the Python bindings.

Build and install first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/robonurse-*.whl
"""

import json
import math
from pathlib import Path

import robonurse

DATA = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"


def main():
    s = robonurse.spo2(1.0, 20.0, 1.0, 20.0)
    assert 0.0 < s < 100.0, s

    rate = 72.0
    fs = 100.0
    wave = [1.0 + 0.5 * math.sin(2 * math.pi * rate / 60.0 * i / fs) for i in range(1000)]
    hr = robonurse.heart_rate(wave, fs)
    assert abs(hr - rate) < 2.0, hr

    x, y, z = robonurse.forward_kinematics([0.0, 0.0, 0.0])
    assert abs(x - 0.47) < 1e-12 and y == 0.0 and z == 0.0
    q = robonurse.inverse_kinematics((0.25, 0.2, 0.0))
    x, y, _ = robonurse.forward_kinematics(q)
    assert math.hypot(x - 0.25, y - 0.2) < 1e-4

    assert robonurse.classify(75.0, 98.0, 98.4) == ["normal"]
    assert "fever" in robonurse.classify(75.0, 98.0, 101.5)

    ranked = robonurse.rank_configurations(str(DATA / "catalog.toml"), str(DATA / "weights.toml"), 3)
    assert len(ranked) == 3
    assert ranked[0][1] <= ranked[1][1] <= ranked[2][1]

    sim = robonurse.Simulator(seed=42)
    sim.submit('{"v":"v1","type":"cmd","id":1,"kind":"camera_pan","params":{"degrees":10},"issued_at":5}', 5.0)
    sim.run_until(400.0)
    sim.finish()
    lines = sim.take_frames()
    assert lines
    for line in lines:
        assert robonurse.decode_frame(line) == line
    acks = [json.loads(l) for l in lines if '"type":"ack"' in l]
    assert acks and acks[0]["accepted"]
    report = json.loads(sim.report())
    assert report["patients_visited"] == 8, report
    assert sim.mode == "docked"

    print(f"ok: {len(lines)} frames, avg checkup {report['avg_checkup_s']:.2f} s, first pick {ranked[0][0]}")


if __name__ == "__main__":
    main()
