"""Smoke test for the vmask_py extension module.

Build and install the module first, for example

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

or build it with cargo and put the library on PYTHONPATH:

    cargo build --release -p vmask-py --features extension-module
    cp target/release/libvmask_py.so python/vmask_py.so
"""

import json
import sys

import vmask_py


def main() -> int:
    cfg = json.loads(vmask_py.default_config())
    assert cfg["mode"] == "vmask", cfg["mode"]
    assert cfg["bottom_widths"] == [64, 32, 16]

    assert vmask_py.check_fc(32, 64)
    assert not vmask_py.check_fc(64, 64)
    assert not vmask_py.check_conv(32, 3, padding=1, stride=1)
    assert vmask_py.check_conv(8, 5, stride=2)
    assert "Secure" in vmask_py.audit()

    cfg.update(
        dataset={"kind": "blobs", "samples": 150, "features": 8, "classes": 3},
        epochs=3,
        attack={"epochs": 5, "select_epochs": 5, "m_per_class": 2},
        aux={"ratio": 0.2},
    )
    summary = vmask_py.train(json.dumps(cfg))
    assert len(summary["losses"]) == 3
    assert summary["masked"][0] == [[1]], summary["masked"]
    assert 0.0 <= summary["mask_ratio"] <= 1.0
    assert set(summary["attacks"]) == {"best/party0", "final/party0"}

    try:
        vmask_py.train(json.dumps({"budget": 3.0}))
    except ValueError as e:
        assert "budget" in str(e)
    else:
        raise AssertionError("invalid budget accepted")

    print(f"vmask_py ok: best accuracy {summary['best_test_accuracy']:.3f}, mask ratio {summary['mask_ratio']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
