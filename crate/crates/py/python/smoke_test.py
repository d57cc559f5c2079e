"""Smoke test for the mftrain extension module."""
import math
import random

import mftrain


def main():
    values = mftrain.pot_values(5)
    assert len(values) == 31 and 0.0 in values

    code, value = mftrain.quantize_scalar(3.0, 5)
    assert value == 4.0, value
    assert mftrain.quantize_scalar(2.5)[1] == 2.0

    rng = random.Random(0)
    a_vals = [rng.gauss(0, 1) for _ in range(6 * 8)]
    b_vals = [rng.gauss(0, 0.1) for _ in range(8 * 4)]
    a = mftrain.QuantBlock.quantize(a_vals, [6, 8])
    b = mftrain.QuantBlock.quantize(b_vals, [8, 4])
    assert a.shape == [6, 8] and a.bits == 5 and len(a) == 48

    da, db = a.dequantize(), b.dequantize()
    for x, q in zip(a_vals, da):
        if q != 0.0:
            assert abs(q - x) <= (math.sqrt(2) - 1) * abs(x) + 1e-12

    out = mftrain.mf_matmul(a, b)
    for i in range(6):
        for j in range(4):
            row = da[i * 8:(i + 1) * 8]
            col = db[j::4]
            assert out[i * 4 + j] == mftrain.reference_dot(row, col)

    flat = mftrain.QuantBlock.quantize(a_vals)
    engine = mftrain.MacEngine()
    assert engine.dot(flat, flat) == mftrain.mf_dot(flat, flat)
    census = engine.census()
    assert census["mac_slots"] == 48 and census["multiplies"] == 0

    top = mftrain.QuantBlock.quantize([1.0] * 9)
    strict = mftrain.MacEngine("strict32")
    strict.dot(top, top)
    assert strict.census()["saturations"] > 0

    again = mftrain.QuantBlock.from_bytes(a.to_bytes())
    assert again.dequantize() == da

    centered = mftrain.weight_bias_correction([1.0, 2.0, 3.0])
    assert centered == [-1.0, 0.0, 1.0]
    clipped, mask = mftrain.ratio_clip([4.0, -1.0, 0.5], 0.5)
    assert clipped == [2.0, -1.0, 0.5] and mask == [True, False, False]

    original = mftrain.iteration_energy("original")
    ours = mftrain.iteration_energy("ours")
    assert abs(original["total"] - 14.53) < 1e-9
    assert abs(ours["total"] - 0.49) / 0.49 < 0.05
    assert "ours" in mftrain.methods()
    elements, _, _ = mftrain.quant_overhead(16, 16)
    assert abs(elements - 0.034 * 256) < 1e-9

    try:
        mftrain.quantize_scalar(1.0, 9)
    except ValueError:
        pass
    else:
        raise AssertionError("bit width 9 accepted")

    print("mftrain smoke test passed")


if __name__ == "__main__":
    main()
