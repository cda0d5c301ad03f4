"""Smoke test for the Python bindings.

Build first:  cargo build --release -p quietmark-py
Then run:     python3 python/smoke_test.py
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import pyquietmark

        return pyquietmark
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpyquietmark.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp()) / "pyquietmark.so"
            shutil.copy(lib, tmp)
            spec = importlib.util.spec_from_file_location("pyquietmark", tmp)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("pyquietmark not built; run `cargo build --release -p quietmark-py`")


def main():
    qm = load_module()
    model = qm.Model("16k", "compact", seed=3)
    assert model.sample_rate == 16000 and model.bins == 1025

    (clip,) = qm.synth_clips(1, 3.0, seed=1)
    marked, report = model.encode(clip, 16000, "a5", alpha=45.0)
    assert len(marked) == len(clip)
    assert report["achieved_sdr_db"] >= 45.0 - 1e-6, report

    out = model.decode(marked, 16000, bits=8)
    assert len(out["payload"]) == 8
    assert len(out["per_position_mode_ratio"]) == 9

    noisy = qm.attack(marked, 16000, "gn:snr=30", seed=2)
    err = sum((a - b) ** 2 for a, b in zip(noisy, marked))
    sig = sum(a * a for a in marked)
    assert abs(10 * math.log10(sig / err) - 30.0) < 0.01

    assert qm.parse_payload("0xa5") == [1, 0, 1, 0, 0, 1, 0, 1]
    frame = [1, 0, 1, 1, 0, 0, 1, 0, 2]
    payload, offset, found = qm.decode_symbols((frame * 4)[3:], 9)
    assert payload == frame[:8] and offset == 6 and found

    try:
        model.encode(clip[:4000], 16000, "deadbeef")
    except ValueError as e:
        assert "too short" in str(e)
    else:
        raise AssertionError("short clip accepted")

    print("pyquietmark smoke test passed")


if __name__ == "__main__":
    main()
