"""PRNG stream correctness against an independent hand implementation."""

import math

import numpy as np

from lmlt.rng import Rng

# Reference outputs of the documented mixing function for seed 1234567,
# matching the generator's published C test vector.
SEED_1234567_RAWS = [
    6457827717110365317,
    3203168211198807973,
    9817491932198370423,
    4593380528125082431,
    16408922859458223821,
]

# First eight uniform doubles for seed 7, frozen from a hand-run of the
# documented stream (mix(seed + i*gamma) >> 11, scaled by 2**-53).
SEED_7_UNIFORMS = [
    0.3898297483912715,
    0.01678829452815611,
    0.9007606806068834,
    0.5829302930280781,
    0.45244189501146836,
    0.24943152228274335,
    0.46795300422287345,
    0.3280767391525029,
]

# First four Box-Muller normals for seed 0, frozen from the same hand-run.
SEED_0_NORMALS = [
    -0.452757740217458,
    0.20776603893419193,
    2.650605812079669,
    -0.4904228253986477,
]


def _hand_stream(seed, n):
    mask = (1 << 64) - 1
    s = seed & mask
    out = []
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & mask
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_known_vector():
    rng = Rng(1234567)
    assert [rng.next_u64() for _ in range(5)] == SEED_1234567_RAWS


def test_hand_stream_agrees():
    rng = Rng(987654321)
    assert [rng.next_u64() for _ in range(32)] == _hand_stream(987654321, 32)


def test_uniform_sequence_seed7():
    rng = Rng(7)
    got = [rng.next_f64() for _ in range(8)]
    assert got == SEED_7_UNIFORMS


def test_normals_seed0():
    rng = Rng(0)
    got = rng.normals(4)
    np.testing.assert_allclose(got, SEED_0_NORMALS, rtol=0, atol=0)


def test_scalar_equals_vector():
    a, b = Rng(55), Rng(55)
    np.testing.assert_array_equal(a.uniforms(1000), [b.next_f64() for _ in range(1000)])
    a2, b2 = Rng(56), Rng(56)
    np.testing.assert_array_equal(a2.normals(100), [b2.normal() for _ in range(100)])


def test_equal_seeds_equal_streams():
    a, b = Rng(2024), Rng(2024)
    np.testing.assert_array_equal(a.uniforms(1_000_000), b.uniforms(1_000_000))


def test_uniform_range():
    u = Rng(3).uniforms(10_000)
    assert (u >= 0).all() and (u < 1).all()
    v = Rng(3).uniforms(1000, -2.0, 5.0)
    assert (v >= -2).all() and (v < 5).all()


def test_odd_normal_fill_consumes_pairs():
    # three normals consume four raws; the next draw starts at raw index 5
    a = Rng(11)
    a.normals(3)
    b = Rng(11)
    b.raw(4)
    assert a.next_u64() == b.next_u64()


def test_normals_moments():
    z = Rng(77).normals(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
