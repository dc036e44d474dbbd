"""Smoke test for the groupvq_py extension module.

Uses an installed `groupvq_py` if present, otherwise builds the extension with
cargo and loads it from the target directory.
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import groupvq_py

        return groupvq_py
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "groupvq-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libgroupvq_py.so"
    loader = importlib.machinery.ExtensionFileLoader("groupvq_py", str(lib))
    spec = importlib.util.spec_from_file_location("groupvq_py", lib, loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    sys.modules["groupvq_py"] = module
    return module


def main():
    g = load_module()

    cb = g.Codebook(64, 8, 4, 3, seed=0)
    codes = cb.materialize()
    idx, _, counts = cb.quantize(codes)
    assert idx == list(range(64)) and counts == [16, 16, 16, 16]
    ext, remap = cb.resample("self-extend", multiple=2)
    assert ext.n == 128 and len(remap) == 64
    print(f"{cb!r} -> {ext!r}")

    data = g.synthetic_dataset(64, seed=0)
    evalset = g.synthetic_dataset(16, seed=1000)
    trainer = g.Trainer(overrides=["codebook_size=64", "mode=\"group:4\"", "epochs=2"])
    for m in trainer.run(data, evalset):
        print(f"epoch {m['epoch']}: utilization {m['utilization']:.3f} recon {m['recon']:.5f} psnr {m['psnr']:.2f}")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "run.gvqc")
        trainer.save(path)
        again = g.Trainer.load(path)
    assert again.codes() == trainer.codes()
    for row in again.extension_sweep([1, 2], evalset):
        print(f"extension x{row['multiple']}: psnr {row['psnr']:.2f} utilization {row['utilization']:.3f}")

    try:
        import numpy as np

        arr = np.frombuffer(codes.tobytes(), dtype="<f4").reshape(codes.shape)
        assert g.Tensor.from_buffer(np.ascontiguousarray(arr)) == codes
    except ImportError:
        pass
    print("smoke test passed")


if __name__ == "__main__":
    main()
