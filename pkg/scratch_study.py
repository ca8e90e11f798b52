"""Parameter study: NP estimator geometry on the nonadditive benchmark."""
import sys
import time

import numpy as np

from c2g import NonparametricC2G, gen_additive, gen_nonadditive, fdr_metric, power_metric
from c2g.selection import PosteriorScores, select_by_average
from c2g.kernels import median_heuristic


def probe(gen, tau, seed, kw):
    ds, truth = gen(1000, tau=tau, seed=seed)
    t0 = time.time()
    model = NonparametricC2G(seed=seed, **kw).fit(ds.x, ds.y, ds.t)
    el = time.time() - t0
    sel = model.select(0.1)
    ts = PosteriorScores(model.treated_indices_, model.w_treated_, "nonparametric")
    us = PosteriorScores(model.untreated_indices_, model.w_untreated_, "nonparametric")
    st = select_by_average(ts, 0.1)
    su = select_by_average(us, 0.1)
    ht = ds.h[model.treated_indices_]
    wn = model.w_treated_[ht == 0]
    return dict(
        el=el, n=sel.n_selected, fdp=fdr_metric(sel.selected, ds.h),
        pow=power_metric(sel.selected, ds.h), t=st.n_selected, u=su.n_selected,
        e=su.n_selected / max(st.n_selected, 1),
        null5=float(np.percentile(wn, 5)), untr5=float(np.percentile(model.w_untreated_, 5)),
        h1=model.f0_.h1_, h2=model.f0_.h2_, k=model.f0_.k_,
    )


if __name__ == "__main__":
    seeds = (0, 1)
    gen, tau = gen_nonadditive, 3.0
    med = median_heuristic(gen(1000, tau=tau, seed=0)[0].x)
    configs = {
        "a_h1tiny_k80": dict(h1_grid=(0.7 * med / 4.3,), k_grid=(80,), support_floor=0.05),
        "b_h1_1.1_k80": dict(h1_grid=(1.08,), k_grid=(80,), support_floor=0.05),
        "c_h1_1.5_k80": dict(h1_grid=(1.5,), k_grid=(80,), support_floor=0.05),
        "d_h1_2.2_k80": dict(h1_grid=(2.16,), k_grid=(80,), support_floor=0.05),
        "e_h1_1.1_k80_q025": dict(h1_grid=(1.08,), k_grid=(80,), q=0.025, support_floor=0.05),
        "f_h1_1.1_k80_fl10": dict(h1_grid=(1.08,), k_grid=(80,), support_floor=0.10),
    }
    which = sys.argv[1:] or list(configs)
    for name in which:
        kw = configs[name]
        for seed in seeds:
            r = probe(gen, tau, seed, kw)
            print(
                f"{name} seed{seed}: sel {r['n']:3d} FDP {r['fdp']:.3f} pow {r['pow']:.3f} "
                f"(t{r['t']}/u{r['u']} e={r['e']:.3f}) w5: null {r['null5']:.3f} untr {r['untr5']:.3f} "
                f"h1={r['h1']:.2f} h2={r['h2']:.2f} k={r['k']} [{r['el']:.0f}s]",
                flush=True,
            )
