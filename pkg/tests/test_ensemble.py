import numpy as np
import pytest
import torch
from torch import nn

from denem import ensemble as ens
from denem.objectives import marginal_probability

DESK = ens.EncoderArch.desk()


@pytest.fixture
def gn_model():
    return ens.make_ensemble(3, DESK, ens.NormPolicy("group", 8), base_seed=10).eval()


def flat_params(module):
    return torch.cat([p.detach().flatten() for p in module.parameters()])


def test_build_five_members_differ():
    model = ens.make_ensemble(5, DESK)
    flats = [flat_params(m) for m in model.members]
    sims = []
    for i in range(5):
        for j in range(i + 1, 5):
            assert not torch.equal(flats[i], flats[j])
            sims.append(torch.nn.functional.cosine_similarity(flats[i], flats[j], dim=0).item())
    assert np.mean(sims) < 0.5


def test_seeds_determine_parameters():
    a = ens.make_ensemble(2, DESK, base_seed=3)
    b = ens.make_ensemble(2, DESK, base_seed=3)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_single_member_and_duplicate_seed():
    assert ens.make_ensemble(1, DESK).num_members == 1
    with pytest.raises(ValueError):
        ens.build_ensemble([ens.MemberSpec(DESK, 1), ens.MemberSpec(DESK, 1)])


def test_group_divisibility_errors():
    with pytest.raises(ValueError):
        ens.make_ensemble(2, ens.EncoderArch(), ens.NormPolicy("group", 7))
    bn = ens.build_member(ens.MemberSpec(ens.EncoderArch(), 0), ens.NormPolicy("batch"))
    with pytest.raises(ValueError):
        ens.substitute_norm_layers(bn, ens.NormPolicy("group", 7))


def test_substitution_removes_batch_norm():
    member = ens.build_member(ens.MemberSpec(ens.EncoderArch(), 0), ens.NormPolicy("batch"))
    n_bn = ens.count_layers(member, nn.BatchNorm2d)
    assert n_bn > 0
    ens.substitute_norm_layers(member, ens.NormPolicy("group", 8))
    assert ens.count_layers(member, nn.BatchNorm2d) == 0
    assert ens.count_layers(member, nn.GroupNorm) == n_bn
    meta = member.norm_metadata
    assert meta["replaced_layers"] == n_bn
    assert meta["param_count_before"] == meta["param_count_after"]
    assert meta["buffer_count_after"] == 0


def test_substitution_identity_on_group_model(gn_model):
    before = [p.clone() for p in gn_model.parameters()]
    ens.substitute_norm_layers(gn_model, ens.NormPolicy("group", 8))
    assert all(torch.equal(a, b) for a, b in zip(before, gn_model.parameters()))
    assert ens.count_layers(gn_model, nn.GroupNorm) > 0


def test_substitution_rejects_unknown_norms():
    model = nn.Sequential(nn.Conv2d(1, 8, 3), nn.LayerNorm(8))
    with pytest.raises(ValueError, match="1"):
        ens.substitute_norm_layers(model, ens.NormPolicy("group", 8))


def test_forward_member_and_marginal(gn_model):
    x = torch.randn(6, 1, 64, 64)
    with torch.no_grad():
        probs, logits = ens.forward_member(gn_model, 0, x)
        assert logits.shape == (6, 2)
        assert torch.allclose(probs.sum(-1), torch.ones(6))
        again, _ = ens.forward_member(gn_model, 0, x)
        assert torch.equal(probs, again)
        dup = torch.cat([x[:1], x[:1]])
        p2, _ = ens.forward_member(gn_model, 1, dup)
        assert torch.equal(p2[0], p2[1])
        marg = ens.forward_marginal(gn_model, x)
        ref = marginal_probability([ens.forward_member(gn_model, m, x)[0] for m in range(3)])
        assert torch.allclose(marg, ref, atol=1e-7)
        assert torch.allclose(marg.sum(-1), torch.ones(6), atol=1e-6)
        assert ((marg >= 0) & (marg <= 1)).all()
    with pytest.raises(ValueError):
        ens.forward_member(gn_model, 0, torch.randn(2, 1, 32, 32))


def test_marginal_of_identical_members():
    model = ens.make_ensemble(3, DESK).eval()
    for m in model.members[1:]:
        m.load_state_dict(model.members[0].state_dict())
    x = torch.randn(4, 1, 64, 64)
    with torch.no_grad():
        assert torch.allclose(ens.forward_marginal(model, x), ens.forward_member(model, 0, x)[0], atol=1e-7)


def test_marginal_of_opposed_members():
    model = ens.make_ensemble(2, DESK).eval()
    with torch.no_grad():
        for m, sign in zip(model.members, (1.0, -1.0)):
            m.fc.weight.zero_()
            m.fc.bias.copy_(torch.tensor([50.0, -50.0]) * sign)
        out = ens.forward_marginal(model, torch.randn(1, 1, 64, 64))
    assert torch.allclose(out, torch.tensor([[0.5, 0.5]]), atol=1e-7)


def _batch_invariance_gap(model, n_samples=100, train=False):
    torch.manual_seed(0)
    samples = torch.randn(n_samples, 1, 64, 64)
    model.train(train)
    worst = 0.0
    with torch.no_grad():
        alone = torch.cat([model(samples[i:i + 1]) for i in range(n_samples)], 1)
        for bs in (8, 32):
            for start in range(0, n_samples, bs):
                idx = torch.arange(start, min(start + bs, n_samples))
                perm = idx[torch.randperm(len(idx))]
                out = model(samples[perm])
                worst = max(worst, (out - alone[:, perm]).abs().max().item())
    return worst


def test_group_norm_batch_invariance(gn_model):
    assert _batch_invariance_gap(gn_model, 40, train=True) < 1e-5


def test_batch_norm_batch_sensitivity():
    bn = ens.make_ensemble(1, DESK, ens.NormPolicy("batch"))
    assert _batch_invariance_gap(bn, 40, train=True) > 1e-5


def test_snapshot_restore_roundtrip(gn_model):
    snap = ens.snapshot(gn_model)
    x = torch.randn(3, 1, 64, 64)
    with torch.no_grad():
        before = gn_model(x)
        for p in gn_model.parameters():
            p.add_(torch.randn_like(p))
    ens.restore(gn_model, snap)
    for state, member in zip(snap.states, gn_model.members):
        for k, v in member.state_dict().items():
            assert torch.equal(v, state[k])
    with torch.no_grad():
        assert torch.equal(gn_model(x), before)


def test_snapshot_covers_running_stats():
    bn = ens.make_ensemble(2, DESK, ens.NormPolicy("batch")).train()
    snap = ens.snapshot(bn)
    with torch.no_grad():
        bn(torch.randn(4, 1, 64, 64) * 3 + 1)
    ens.restore(bn, snap)
    for state, member in zip(snap.states, bn.members):
        for k, v in member.state_dict().items():
            assert torch.equal(v, state[k])


def test_restore_mismatch_errors(gn_model):
    snap = ens.snapshot(gn_model)
    with pytest.raises(ValueError):
        ens.restore(ens.make_ensemble(2, DESK, ens.NormPolicy("group", 8)), snap)
    with pytest.raises(ValueError):
        ens.restore(ens.make_ensemble(3, DESK, ens.NormPolicy("batch")), snap)


def test_snapshot_restore_after_training_steps(gn_model):
    x = torch.randn(5, 1, 64, 64)
    with torch.no_grad():
        before = ens.forward_marginal(gn_model, x)
    snap = ens.snapshot(gn_model)
    opt = torch.optim.SGD(gn_model.parameters(), lr=0.1)
    for _ in range(5):
        loss = -torch.log(ens.forward_marginal(gn_model, x)[:, 1]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert not torch.equal(ens.forward_marginal(gn_model, x), before)
        ens.restore(gn_model, snap)
        assert torch.equal(ens.forward_marginal(gn_model, x), before)


def test_checkpoint_roundtrip(tmp_path, gn_model):
    ens.save_checkpoint(gn_model, tmp_path / "ckpt", config_hash="abc")
    loaded = ens.load_checkpoint(tmp_path / "ckpt").eval()
    manifest = ens.read_manifest(tmp_path / "ckpt")
    assert manifest["seeds"] == gn_model.seeds and manifest["config_hash"] == "abc"
    assert manifest["norm"] == {"kind": "group", "num_groups": 8}
    x = torch.randn(2, 1, 64, 64)
    with torch.no_grad():
        assert torch.equal(loaded(x), gn_model(x))
