import pytest
import torch
from torch.nn import functional as F

from lineagegan import MultiScaleDiscriminator, discriminate

# (kernel, stride, padding) of the scale-0 stack: four downsampling convs
# followed by the 1-channel score conv
SCALE0_LAYERS = [(4, 2, 1)] * 4 + [(3, 1, 1)]


def make_disc(seed=0, **kwargs):
    torch.manual_seed(seed)
    return MultiScaleDiscriminator(**kwargs)


def family_input(seed=0, b=1, n=7, s=64):
    torch.manual_seed(seed + 10)
    family = torch.rand(b, n, 3, s, s) * 2 - 1
    candidate = torch.rand(b, 3, s, s) * 2 - 1
    return family, candidate


def receptive_interval(index, layers):
    """Input index range feeding one output position, by interval arithmetic."""
    lo = hi = index
    for k, s, p in reversed(layers):
        lo = lo * s - p
        hi = hi * s - p + (k - 1)
    return lo, hi


class TestShapes:
    def test_patch_map_sizes_at_64px(self):
        d = make_disc(n_scales=2)
        family, candidate = family_input()
        outputs = d(family, candidate)
        assert len(outputs) == 2
        assert outputs[0][0].shape == (1, 1, 4, 4)
        assert outputs[1][0].shape == (1, 1, 2, 2)

    def test_intermediate_feature_shapes(self):
        d = make_disc()
        family, candidate = family_input()
        _, features = d(family, candidate)[0]
        assert [tuple(f.shape[1:]) for f in features] == [
            (32, 32, 32),
            (64, 16, 16),
            (128, 8, 8),
            (256, 4, 4),
        ]

    def test_unbatched_call(self):
        d = make_disc()
        family, candidate = family_input()
        patch, features = discriminate(d, family[0], candidate[0])[0]
        assert patch.shape == (1, 4, 4)
        assert features[0].shape == (32, 32, 32)

    def test_family_size_mismatch(self):
        d = make_disc()
        family, candidate = family_input(n=5)
        with pytest.raises(ValueError, match="family nodes"):
            d(family, candidate)

    def test_candidate_shape_mismatch(self):
        d = make_disc()
        family, candidate = family_input()
        with pytest.raises(ValueError, match="candidate shape"):
            d(family, candidate[:, :, ::2, ::2])


class TestBehavior:
    def test_deterministic(self):
        d = make_disc(1)
        family, candidate = family_input(1)
        out1 = d(family, candidate)
        out2 = d(family, candidate)
        for (p1, f1), (p2, f2) in zip(out1, out2):
            assert torch.equal(p1, p2)
            for a, b in zip(f1, f2):
                assert torch.equal(a, b)

    def test_zero_input_finite(self):
        d = make_disc(2)
        outputs = d(torch.zeros(1, 7, 3, 64, 64), torch.zeros(1, 3, 64, 64))
        for patch, features in outputs:
            assert torch.isfinite(patch).all()
            assert all(torch.isfinite(f).all() for f in features)

    def test_scale1_sees_exact_average_pooling(self):
        d = make_disc(3)
        family, candidate = family_input(3)
        b, n = family.shape[:2]
        x = torch.cat([family.reshape(b, 3 * n, 64, 64), candidate], dim=1)
        expected_patch, expected_feats = d.scales[1](F.avg_pool2d(x, 2))
        actual_patch, actual_feats = d(family, candidate)[1]
        assert torch.equal(actual_patch, expected_patch)
        for a, e in zip(actual_feats, expected_feats):
            assert torch.equal(a, e)

    def test_patch_locality_via_receptive_field(self):
        d = make_disc(4)
        family, candidate = family_input(4)
        base_patch = d(family, candidate)[0][0]
        py, px = 21, 38  # one sampled pixel (row, col)
        perturbed = candidate.clone()
        perturbed[0, 1, py, px] += 1.0
        new_patch = d(family, perturbed)[0][0]
        changed = (new_patch != base_patch)[0, 0]
        for i in range(changed.shape[0]):
            lo_y, hi_y = receptive_interval(i, SCALE0_LAYERS)
            for j in range(changed.shape[1]):
                lo_x, hi_x = receptive_interval(j, SCALE0_LAYERS)
                inside = lo_y <= py <= hi_y and lo_x <= px <= hi_x
                if inside:
                    assert changed[i, j], f"patch ({i},{j}) should see pixel ({py},{px})"
                else:
                    assert not changed[i, j], f"patch ({i},{j}) must not see pixel ({py},{px})"
