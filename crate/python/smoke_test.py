"""Smoke test for the `tpc` extension module.

Build and install first, e.g. `pip install --no-build-isolation -e crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this file.
"""

import math
import tempfile

import tpc


def main():
    stamps, values = tpc.generate_synthetic(length=600, seed=1)
    assert len(stamps) == len(values) == 600
    assert stamps[0] == "2017-01-01 00:00:00"

    assert tpc.patch_count(96, 16, 16) == 7
    patches = tpc.patchify(values[:96], 16, 16)
    assert len(patches) == 7 and patches[-1] == values[80:96]

    normed, mean, std = tpc.revin_normalize(values[:96])
    back = tpc.revin_denormalize(normed, mean, std)
    assert max(abs(a - b) for a, b in zip(back, values[:96])) < 1e-10

    prompt = tpc.render_prompt("2017-01-01 00:00:00", "2017-01-02 23:00:00")
    assert prompt == (
        "This series spans 2017-01-01 00:00:00 to 2017-01-02 23:00:00. "
        "Sampling granularity: hourly."
    )

    cfg = tpc.resolve_config(overrides={"model.lookback": "48"})
    assert "model.lookback = 48" in cfg

    model = tpc.Model(seed=0)
    report = model.param_report()
    assert report["trainable"] <= 0.5 * report["total"]
    assert sum(g["total"] for g in report["groups"]) == report["total"]

    bank = model.bank("2017-01-01 00:00:00")
    assert len(bank) == model.n_patches and len(bank[0]) == 64
    pred = model.predict(tpc.patchify(normed, 16, 16), bank)
    assert len(pred) == model.n_patches and len(pred[0]) == 16

    forecast = model.forecast(values[:96], stamps[0], 32)
    assert len(forecast) == 32 and all(math.isfinite(v) for v in forecast)

    with tempfile.TemporaryDirectory() as out:
        metrics = tpc.train(
            out,
            overrides={
                "data.synthetic.length": "700",
                "data.train_stride": "16",
                "data.eval_stride": "16",
                "train.epochs": "1",
            },
            seed=3,
        )
        assert metrics["test"]["mse"] < metrics["persistence"]["mse"]
        loaded = tpc.Model.load(f"{out}/checkpoint.tpck")
        assert loaded.fingerprint() == metrics["checkpoint_fingerprint"]

    try:
        tpc.Model(overrides={"model.lookbak": "3"})
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
