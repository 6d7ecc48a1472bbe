import math

import numpy as np
import pytest

from loopboltz import tables
from loopboltz.energy import (
    AtomSet,
    EnergyDataError,
    EnergyModel,
    OffGridError,
    OmegaModel,
    PairwiseEnergyTable,
    RamachandranGrid,
    RotamerLibrary,
    atom_code,
    exclusion_mask,
)


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    d = tmp_path_factory.mktemp("tables")
    tables.generate_default_tables(d, rama_style="uniform", n=72)
    return EnergyModel.load(d)


def atomset(*items):
    """items: (res, res_type, name, coord)"""
    return AtomSet.from_atoms(items)


def test_rama_uniform_value(model):
    assert model.rama_term("A", -60.0, -45.0) == pytest.approx(math.log(5184.0))
    with pytest.raises(OffGridError):
        model.rama_term("A", -60.1, -45.0)
    # 180 wraps onto the -180 grid point
    assert model.rama_term("A", 180.0, 175.0) == pytest.approx(math.log(5184.0))


def test_rama_cutoff_masks_to_inf():
    t = tables.gen_rama_uniform(8)["A"]
    t[0, 0] = 0.00001
    t[1:] += (1.0 - t.sum()) / t[1:].size  # renormalize away from the low cell
    grid = RamachandranGrid({"A": t}, spacing=45.0, cutoff=2e-5)
    assert math.isinf(grid.neg_log_prob("A", -180.0, -180.0))
    assert math.isfinite(grid.neg_log_prob("A", -135.0, -90.0))


def test_rama_sum_invariant():
    t = tables.gen_rama_uniform(8)
    t["A"] = t["A"] * 1.5
    with pytest.raises(EnergyDataError):
        RamachandranGrid({"A": t["A"]}, spacing=45.0)


def test_rama_most_probable_cell_matches_table():
    t = tables.gen_rama_basins(72)
    grid = RamachandranGrid(t, spacing=5.0)
    arr = t["A"]
    i, j = np.unravel_index(np.argmax(arr), arr.shape)
    phi, psi = grid.angle_of(int(i)), grid.angle_of(int(j))
    assert grid.neg_log_prob("A", phi, psi) == pytest.approx(-math.log(arr.max()))


def test_omega_mode_density():
    om = OmegaModel()
    assert om.logdensity("A", 180.0) == pytest.approx(
        math.log(1.0 / (2.75 * math.sqrt(2 * math.pi))))
    # symmetry about the mode, evaluated across the wrap
    assert om.density("A", 175.0) == pytest.approx(om.density("A", -175.0))
    got = om.logdensity("P", 0.0)
    want = math.log(0.1 / (2.75 * math.sqrt(2 * math.pi)))
    assert got == pytest.approx(want, abs=1e-12)
    np.testing.assert_allclose(
        om.logdensity_vec("P", np.array([0.0, 180.0, 12.5])),
        [om.logdensity("P", v) for v in (0.0, 180.0, 12.5)])


def test_omega_sampler_wraps(model):
    rng = np.random.default_rng(0)
    draws = model.omega.sample("A", rng, 4000)
    assert np.all(draws > -180.0) and np.all(draws <= 180.0)
    # mass concentrates near the trans mode
    d = np.mod(draws - 180.0 + 180.0, 360.0) - 180.0
    assert np.std(d) == pytest.approx(2.75, rel=0.1)
    pro = model.omega.sample("P", rng, 4000)
    cis = np.abs(np.mod(pro + 180.0, 360.0) - 180.0) < 20.0
    assert 0.05 < cis.mean() < 0.16


def test_rotamer_library_invariants():
    rots, probs = tables.ROTAMER_STANDIN, None
    lib = RotamerLibrary(rots, probs)
    assert lib.chi("G").shape == (1, 0)
    assert lib.chi("A").shape == (1, 0)
    assert lib.chi("S").shape == (3, 1)
    assert lib.chi("R").shape == (81, 4)
    assert lib.first_chi_sd == 10.0
    with pytest.raises(EnergyDataError):
        RotamerLibrary({"S": [(200.0,)]})
    bad = dict(tables.ROTAMER_STANDIN)
    del bad["S"]
    with pytest.raises(EnergyDataError):
        RotamerLibrary(bad)


def test_clash_is_infinite(model):
    a = atomset((1, "A", "CA", (0.0, 0.0, 0.0)))
    b = atomset((5, "A", "CA", (0.5, 0.0, 0.0)))
    assert math.isinf(model.interaction_energy(a, b))


def test_out_of_range_is_zero(model):
    a = atomset((1, "A", "CA", (0.0, 0.0, 0.0)))
    b = atomset((5, "A", "CA", (9.0, 0.0, 0.0)))
    assert model.interaction_energy(a, b) == 0.0


def test_three_atom_system_matches_table_lookup(model):
    # oracle: direct table lookups for the two scored pairs
    pw = model.pairwise
    a = atomset((1, "A", "CA", (0.0, 0.0, 0.0)))
    b = atomset((5, "A", "CA", (3.6, 0.0, 0.0)), (5, "A", "O", (0.0, 3.2, 0.0)))
    ic, io = 0, 2  # element indices C, O
    e_cc = pw.energies[ic, ic, int(3.6 / pw.bin_width)]
    e_co = pw.energies[ic, io, int(3.2 / pw.bin_width)]
    assert model.interaction_energy(a, b) == pytest.approx(e_cc + e_co)


def test_interaction_symmetry(model):
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = atomset(*[(1, "A", "CA", rng.uniform(2, 6, 3)) for _ in range(4)])
        b = atomset(*[(9, "A", "O", rng.uniform(2, 6, 3)) for _ in range(3)])
        assert model.interaction_energy(a, b) == pytest.approx(
            model.interaction_energy(b, a), rel=1e-12)


def test_exclusions():
    # same residue never scored; peptide 1-2/1-3 pairs never scored
    res_a = np.array([1, 1])
    code_a = np.array([atom_code("C", "A"), atom_code("O", "A")])
    res_b = np.array([2, 2, 1])
    code_b = np.array([atom_code("N", "A"), atom_code("CA", "A"), atom_code("CB", "A")])
    m = exclusion_mask(res_a, code_a, res_b, code_b)
    assert m[0, 0]          # C(i) - N(i+1): 1-2
    assert m[0, 1]          # C(i) - CA(i+1): 1-3
    assert m[1, 0]          # O(i) - N(i+1): 1-3
    assert m[0, 2] and m[1, 2]  # same residue
    # proline ring: CD of PRO(i+1) is 1-3 to C(i); ARG's CD is not
    m2 = exclusion_mask(np.array([1]), np.array([atom_code("C", "A")]),
                        np.array([2, 2]),
                        np.array([atom_code("CD", "P"), atom_code("CD", "R")]))
    assert m2[0, 0] and not m2[0, 1]


def test_batch_matches_scalar(model):
    rng = np.random.default_rng(4)
    ctx = atomset(*[(10 + i, "A", "CA", rng.uniform(-4, 4, 3)) for i in range(30)])
    new_meta = atomset(*[(1, "A", n, (0, 0, 0)) for n in ("N", "CA", "C", "O")])
    coords = rng.uniform(-4, 4, size=(16, 4, 3))
    batch = model.pairwise.pair_sum_batch(
        coords, (new_meta.res, new_meta.elem, new_meta.code),
        ctx.coords, (ctx.res, ctx.elem, ctx.code))
    for k in range(16):
        single = AtomSet(coords[k], new_meta.res, new_meta.elem, new_meta.code)
        expect = model.interaction_energy(single, ctx)
        if math.isinf(expect):
            assert math.isinf(batch[k])
        else:
            assert batch[k] == pytest.approx(expect, rel=1e-12)


def test_beta_scaling(model):
    a = atomset((1, "A", "CA", (0.0, 0.0, 0.0)))
    ctx = atomset((5, "A", "O", (3.3, 0.0, 0.0)))
    inc1 = model.sidechain_increment(a, ctx)
    model2 = EnergyModel(model.rama, model.omega, model.rotamers, model.pairwise,
                         beta1=2.0, beta2=0.2, beta3=2.0, beta4=0.2)
    assert model2.sidechain_increment(a, ctx) == pytest.approx(2 * inc1)
    with pytest.raises(EnergyDataError):
        EnergyModel(model.rama, model.omega, model.rotamers, model.pairwise,
                    beta1=-1.0)


def test_backbone_increment_components(model):
    new = atomset((1, "A", "C", (0.0, 0.0, 0.0)))
    ctx = atomset((5, "A", "CA", (3.5, 0.0, 0.0)))
    inc = model.backbone_increment("A", -60.0, -45.0, "A", 179.0, new, ctx)
    want = (model.beta1 * (model.rama_term("A", -60.0, -45.0)
                           - model.omega_logdensity("A", 179.0))
            + model.beta2 * model.interaction_energy(new, ctx))
    assert inc == pytest.approx(want)
    assert math.isinf(model.backbone_increment("A", -60.0, -45.0, "A", 179.0,
                                               new, ctx, reachable=False))


def test_closure_increment_respects_flag(model):
    new = atomset((1, "A", "C", (0.0, 0.0, 0.0)))
    ctx = atomset((5, "A", "CA", (3.5, 0.0, 0.0)))
    bridge = [("A", -61.0, -44.0), ("G", 55.0, 44.0), ("A", -120.0, 130.0)]
    omegas = [("A", 180.0), ("A", 180.0), ("A", 180.0)]
    inc = model.closure_increment(bridge, omegas, new, ctx)
    flag_off = EnergyModel(model.rama, model.omega, model.rotamers, model.pairwise,
                           score_closure_dihedrals=False)
    inc_off = flag_off.closure_increment(bridge, omegas, new, ctx)
    assert inc > inc_off
    assert inc_off == pytest.approx(model.beta2 * model.interaction_energy(new, ctx))


def test_model_load_checksums(tmp_path):
    tables.generate_default_tables(tmp_path, rama_style="uniform", n=8)
    m = EnergyModel.load(tmp_path)
    assert set(m.checksums) == {"rama.tsv", "rotamers.tsv", "pairwise.tsv"}
    assert m.beta1 == 1.0 and m.beta2 == 0.1 and m.beta3 == 1.0 and m.beta4 == 0.1
    with pytest.raises(EnergyDataError):
        EnergyModel.load(tmp_path / "missing")
