"""Command-line surface: gradient checks, scene fitting, any-view rendering,
diffusion training/sampling/ablation, and checkpoint evaluation.

Exit codes: 0 success, 1 acceptance failure, 2 configuration error. Every
command is deterministic given (config, seed) and writes only under --out.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env():
    """TRIFIELD_THREADS caps the BLAS pools; must run before numpy loads."""
    n = os.environ.get("TRIFIELD_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _write_metrics(path, items):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in items:
            f.write(f"{key}={value}\n")


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _numerics_entries(rng, seed):
    from . import autodiff as ad

    entries = [(f"numerics.{name}", 1e-6, lambda f=f, x=x: ad.grad_check(f, x))
               for name, f, x in ad.primitive_suite(seed)]
    w1 = ad.Tensor(rng.normal(size=(8, 6)))
    b1 = ad.Tensor(rng.normal(size=(6,)))
    w2 = ad.Tensor(rng.normal(size=(6, 1)))
    b2 = ad.Tensor(rng.normal(size=(1,)))

    def mlp_head(x):
        h = ad.relu(ad.affine(ad.reshape(x, (1, 8)), w1, b1))
        return ad.reshape(ad.affine(h, w2, b2), ())

    x0 = ad.Tensor(rng.normal(size=(8,)) + 0.05, requires_grad=True)
    entries.append(("numerics.mlp_head", 1e-6, lambda: ad.grad_check(mlp_head, x0)))
    return entries


def _attention_entries(rng):
    from . import attention as at
    from . import autodiff as ad
    from . import triplane as tp

    d, c = 4, 2
    tri = tp.random_triplane(rng, d, c, scale=0.8)
    probe = ad.Tensor(rng.normal(size=(d, d, c)))
    text = at.TextEmbedding(ad.Tensor(rng.normal(size=(3, 5))))
    pr_oa = at.attention_params(rng, c, d_k=3, zero_out=False)
    pr_ca = at.attention_params(rng, c, d_k=3, kv_dim=5, zero_out=False)
    pr_refine = at.refine_params(rng, c, d_k=3, d_model=5, depth=2)
    for block in pr_refine.blocks:  # non-trivial path through every sub-op
        block.ca.w_o.data = rng.normal(scale=0.3, size=block.ca.w_o.data.shape)
        block.oa.w_o.data = rng.normal(scale=0.3, size=block.oa.w_o.data.shape)
        block.mlp_w2.data = rng.normal(scale=0.3, size=block.mlp_w2.data.shape)

    def with_plane(x):
        return tp.Triplane((ad.reshape(x, (d, d, c)), tri.planes[1], tri.planes[2]))

    def on_plane(fn):
        return lambda: ad.grad_check(fn, ad.Tensor(tri.planes[0].data.copy(), requires_grad=True))

    def oa_loss(x):
        return ad.tsum(ad.mul(at.orthogonal_attention(with_plane(x), pr_oa, d // 2).planes[0], probe))

    def ca_loss(x):
        return ad.tsum(ad.mul(at.cross_attention(with_plane(x), text, pr_ca).planes[0], probe))

    def refine_loss(x):
        return ad.tsum(ad.mul(at.transformer_refine(with_plane(x), text, 2, pr_refine).planes[0], probe))

    return [
        ("attention.orthogonal", 1e-6, on_plane(oa_loss)),
        ("attention.cross", 1e-6, on_plane(ca_loss)),
        ("attention.transformer_refine", 1e-5, on_plane(refine_loss)),
    ]


def _renderer_entries(rng):
    import numpy as np

    from . import autodiff as ad
    from . import render as rd
    from . import training as tr
    from . import triplane as tp
    from .scenes import look_at_origin

    d, c = 4, 2
    tri = tp.random_triplane(rng, d, c, scale=0.8)
    pts = rng.uniform(-0.85, 0.85, size=(5, 3)) + 0.0137  # off grid lines
    probe = ad.Tensor(rng.normal(size=(5, 3 * c)))
    heads = rd.init_field_heads(rng, 3 * c, hidden=8, depth=2)
    ts = np.sort(rng.uniform(0.2, 3.8, size=(3, 6)), axis=1)
    cols = ad.Tensor(rng.uniform(size=(3, 6, 3)))
    sig0 = ad.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    pos = np.array([2.5, 0.4, 0.8])
    cam = rd.Camera(pos, look_at_origin(pos), 1.1, 4, 4)

    def with_plane(x):
        return tp.Triplane((ad.reshape(x, (d, d, c)), tri.planes[1], tri.planes[2]))

    def on_plane(fn):
        return lambda: ad.grad_check(fn, ad.Tensor(tri.planes[0].data.copy(), requires_grad=True))

    def samp_loss(x):
        return ad.tsum(ad.mul(tp.sample_triplane(with_plane(x), pts), probe))

    def sigma_loss(x):
        sigma, _ = rd.field_eval_batch(with_plane(x), heads, pts)
        return ad.tsum(sigma)

    def integrate_loss(x):
        rgb, mask, depth = rd.integrate_rays(ad.softplus(x), cols, ts, 4.0)
        return ad.add(ad.tsum(rgb), ad.add(ad.tsum(mask), ad.tsum(ad.mul(depth, 0.1))))

    def render_loss_fn(x):
        bundle = rd.generate_rays(cam)
        rgb, mask, depth = rd.render_rays(with_plane(x), heads, bundle.origins, bundle.directions,
                                          bundle.t_near, bundle.t_far, 8)
        pred = rd.RenderOutput(rgb, mask, depth)
        gt = rd.RenderOutput(np.zeros((16, 3)), np.zeros(16), np.full(16, bundle.t_far))
        return tr.render_loss([pred], [gt])

    return [
        ("renderer.sample_triplane", 1e-6, on_plane(samp_loss)),
        ("renderer.field_eval_sigma", 1e-5, on_plane(sigma_loss)),
        ("renderer.integrate_ray", 1e-6, lambda: ad.grad_check(integrate_loss, sig0)),
        ("renderer.render_loss_path", 1e-4, on_plane(render_loss_fn)),
    ]


def _gradcheck_entries(scope, seed):
    import numpy as np

    entries = []  # (name, threshold, fn() -> max_rel_error)
    rng = np.random.default_rng(seed)
    if scope in ("all", "numerics"):
        entries += _numerics_entries(rng, seed)
    if scope in ("all", "attention"):
        entries += _attention_entries(rng)
    if scope in ("all", "renderer"):
        entries += _renderer_entries(rng)
    return entries


def cmd_gradcheck(args):
    from . import autodiff as ad

    if args.inject_fault:
        original = getattr(ad, args.inject_fault, None)
        if original is None:
            print(f"no such op to corrupt: {args.inject_fault}", file=sys.stderr)
            return 2

        def corrupted(*a, **k):
            out = original(*a, **k)
            clean = out._backward
            if clean is not None:
                out._backward = lambda g: tuple((p, pg * 1.01) for p, pg in clean(g))
            return out

        setattr(ad, args.inject_fault, corrupted)

    entries = _gradcheck_entries(args.scope, args.seed)
    failures = 0
    print(f"{'op':36s} {'max_rel_err':>12s} {'threshold':>10s} status")
    for name, threshold, fn in entries:
        err = fn()
        ok = err < threshold
        failures += 0 if ok else 1
        print(f"{name:36s} {err:12.3e} {threshold:10.0e} {'pass' if ok else 'FAIL'}")
    if args.inject_fault:
        setattr(ad, args.inject_fault, original)
    print(f"{len(entries) - failures}/{len(entries)} passed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# fit / render / eval
# ---------------------------------------------------------------------------

def _scene_from_config(cfg):
    from . import scenes as sc

    kind = cfg["scene.kind"]
    params = {}
    if kind == "sphere":
        params = {"radius": cfg["scene.radius"], "density": cfg["scene.density"]}
    elif kind == "cube":
        params = {"half": cfg["scene.half"], "density": cfg["scene.density"]}
    elif kind == "two_blob":
        params = {"amplitude": cfg["scene.amplitude"], "width": cfg["scene.width"]}
    return sc.make_scene(kind, params)


def _load_config(args):
    from .config import RunConfig, parse_config

    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg


def cmd_fit(args):
    import numpy as np

    from . import scenes as sc
    from . import training as tr
    from .checkpoint import save_fit_checkpoint
    from .images import write_pgm, write_ppm
    from .render import render_view

    cfg = _load_config(args)
    scene = _scene_from_config(cfg)
    elev = np.deg2rad(cfg["fit.elevation_deg"])
    radius = cfg["fit.orbit_radius"]
    size = cfg["fit.image_size"]
    cams = sc.camera_orbit(cfg["fit.views"], radius, elev, height=size, width=size,
                           azimuth_offset=np.deg2rad(cfg["fit.azimuth_offset_deg"]))
    views = [(cam, sc.oracle_render(scene, cam, cfg["eval.oracle_samples"])) for cam in cams]

    fit_cfg = tr.FitConfig(
        iterations=cfg["fit.iterations"], lr_planes=cfg["fit.lr_planes"], lr_heads=cfg["fit.lr_heads"],
        ray_batch=cfg["fit.ray_batch"], samples_per_ray=cfg["fit.samples_per_ray"],
        grid_resolution=cfg["fit.grid_resolution"], grid_channels=cfg["fit.grid_channels"],
        hidden=cfg["fit.hidden"], mlp_depth=cfg["fit.mlp_depth"], n_freqs=cfg["fit.n_freqs"],
        val_every=cfg["fit.val_every"], val_rays=cfg["fit.val_rays"],
        stratified=cfg["fit.stratified"], seed=cfg["seed"],
    )
    weights = tr.LossWeights(cfg["fit.lambda_mask"], cfg["fit.lambda_depth"], cfg["fit.lambda_perceptual"])
    logs = []
    result = tr.fit_scene(views, fit_cfg, weights, log=lambda s, l, v: logs.append((s, l, v)))

    metrics = [(f"loss.{s:05d}", _fmt(l)) for s, l, _ in logs]
    metrics += [(f"val.{s:05d}", _fmt(v)) for s, _, v in logs]
    metrics += [("best_val", _fmt(result.best_val)), ("steps", result.steps_run),
                ("diverged", int(result.diverged)),
                ("mean_sigma", _fmt(tr.mean_density(result.triplane, result.heads)))]

    n_render = cfg["render.samples_per_ray"]
    eval_elev = np.deg2rad(cfg["eval.elevation_deg"])
    psnrs = []
    for az_deg in [float(a) for a in cfg["eval.azimuths_deg"].split(",")]:
        cam = sc.orbit_camera(np.deg2rad(az_deg), eval_elev, radius, height=size, width=size)
        gt = sc.oracle_render(scene, cam, cfg["eval.oracle_samples"])
        pred = render_view(result.triplane, result.heads, cam, n_render)
        val = tr.psnr(pred.image, gt.image)
        psnrs.append(val)
        metrics.append((f"psnr.holdout.{az_deg:g}", _fmt(val)))
    metrics.append(("psnr.holdout.mean", _fmt(np.mean(psnrs))))

    az_u = cfg["eval.unseen_azimuth_deg"]
    cam = sc.orbit_camera(np.deg2rad(az_u), eval_elev, radius, height=size, width=size)
    gt = sc.oracle_render(scene, cam, cfg["eval.oracle_samples"])
    pred = render_view(result.triplane, result.heads, cam, n_render)
    metrics.append((f"psnr.unseen.{az_u:g}", _fmt(tr.psnr(pred.image, gt.image))))

    out = cfg["out"]
    save_fit_checkpoint(os.path.join(out, "checkpoint.trifield"), result.triplane, result.heads)
    write_ppm(os.path.join(out, "preview_rgb.ppm"), pred.image)
    write_pgm(os.path.join(out, "preview_mask.pgm"), pred.mask)
    from .render import default_bounds

    tn, tf = default_bounds(cam.position)
    write_pgm(os.path.join(out, "preview_depth.pgm"), (pred.depth - tn) / (tf - tn))
    _write_metrics(os.path.join(out, "metrics.txt"), metrics)
    print(f"wrote {out}/checkpoint.trifield and {out}/metrics.txt")
    return 1 if result.diverged else 0


def cmd_render(args):
    import numpy as np

    from . import scenes as sc
    from .checkpoint import load_fit_checkpoint
    from .images import write_pgm, write_ppm
    from .render import default_bounds, render_view
    from .triplane import CheckpointError

    cfg = _load_config(args)
    try:
        tri, heads = load_fit_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    size = args.size or cfg["render.size"]
    n = cfg["render.samples_per_ray"]
    radius = cfg["fit.orbit_radius"]
    out = cfg["out"]
    for token in str(args.azimuth).split(","):
        az = float(token)
        cam = sc.orbit_camera(np.deg2rad(az), np.deg2rad(args.elevation), radius, height=size, width=size)
        view = render_view(tri, heads, cam, n)
        tag = f"az{token.strip()}_el{args.elevation:g}"
        write_ppm(os.path.join(out, f"view_{tag}.ppm"), view.image)
        write_pgm(os.path.join(out, f"view_{tag}_mask.pgm"), view.mask)
        tn, tf = default_bounds(cam.position)
        write_pgm(os.path.join(out, f"view_{tag}_depth.pgm"), (view.depth - tn) / (tf - tn))
        print(f"wrote view_{tag}.ppm")
    return 0


def cmd_eval(args):
    import numpy as np

    from . import scenes as sc
    from . import training as tr
    from .checkpoint import load_fit_checkpoint
    from .render import render_view
    from .triplane import CheckpointError

    cfg = _load_config(args)
    try:
        tri, heads = load_fit_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    scene = _scene_from_config(cfg)
    size = cfg["render.size"]
    radius = cfg["fit.orbit_radius"]
    elev = np.deg2rad(cfg["eval.elevation_deg"])
    metrics = []
    psnrs = []
    for az_deg in [float(a) for a in cfg["eval.azimuths_deg"].split(",")]:
        cam = sc.orbit_camera(np.deg2rad(az_deg), elev, radius, height=size, width=size)
        gt = sc.oracle_render(scene, cam, cfg["eval.oracle_samples"])
        pred = render_view(tri, heads, cam, cfg["render.samples_per_ray"])
        val = tr.psnr(pred.image, gt.image)
        psnrs.append(val)
        metrics.append((f"psnr.{az_deg:g}", _fmt(val)))
    metrics.append(("psnr.mean", _fmt(np.mean(psnrs))))
    _write_metrics(os.path.join(cfg["out"], "eval_metrics.txt"), metrics)
    print(f"mean PSNR {np.mean(psnrs):.2f} dB over {len(psnrs)} views")
    return 0


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

def _triplane_previews(out_dir, stem, tri):
    import numpy as np

    from .images import write_pgm, write_ppm

    occ = np.concatenate([np.clip(p.data[:, :, 0], 0.0, 1.0) for p in tri.planes], axis=1)
    write_pgm(os.path.join(out_dir, f"{stem}_occ.pgm"), occ)
    rgb = np.concatenate([np.clip(p.data[:, :, 1:4], 0.0, 1.0) for p in tri.planes], axis=1)
    write_ppm(os.path.join(out_dir, f"{stem}_rgb.ppm"), rgb)


def _diffusion_dataset(cfg):
    from . import scenes as sc

    return sc.make_toy_triplane_dataset(
        cfg["diffusion.dataset_size"], d=cfg["diffusion.grid_resolution"],
        c=cfg["diffusion.grid_channels"], seed=cfg["diffusion.dataset_seed"],
    )


def _train_cfgs(cfg, use_oa):
    from . import diffusion as df

    train_cfg = df.DiffusionTrainConfig(
        steps=cfg["diffusion.steps"], batch=cfg["diffusion.batch"], lr=cfg["diffusion.lr"],
        timesteps=cfg["diffusion.timesteps"], beta_start=cfg["diffusion.beta_start"],
        beta_end=cfg["diffusion.beta_end"], freeze_backbone=cfg["diffusion.freeze_backbone"],
        seed=cfg["seed"],
    )
    model_cfg = df.DenoiserConfig(
        hidden=cfg["diffusion.hidden"], d_k=cfg["diffusion.d_k"], d_model=cfg["diffusion.d_model"],
        use_adapters=True, adapter_attention=use_oa, seed=cfg["seed"],
    )
    return train_cfg, model_cfg


def cmd_diffusion(args):
    import numpy as np

    from . import diffusion as df

    cfg = _load_config(args)
    out = cfg["out"]
    rng = np.random.default_rng(cfg["seed"])

    if args.mode == "train":
        dataset = _diffusion_dataset(cfg)
        train_cfg, model_cfg = _train_cfgs(cfg, cfg["diffusion.use_oa"])
        denoiser = None
        if args.checkpoint:
            denoiser = df.load_denoiser(args.checkpoint)
            if train_cfg.freeze_backbone and not denoiser.cfg.use_adapters:
                denoiser = df.with_adapters(denoiser, seed=cfg["seed"])
        result = df.train_denoiser(dataset, train_cfg, model_cfg=model_cfg, denoiser=denoiser)
        df.save_denoiser(os.path.join(out, "denoiser.ckpt"), result.denoiser)
        metrics = [(f"loss.{i:05d}", _fmt(v)) for i, v in enumerate(result.history, start=1) if i % 100 == 0]
        metrics += [("loss.final", _fmt(np.mean(result.history[-20:]))), ("diverged", int(result.diverged))]
        _write_metrics(os.path.join(out, "metrics.txt"), metrics)
        print(f"final loss {np.mean(result.history[-20:]):.4f}")
        return 1 if result.diverged else 0

    if args.mode == "sample":
        denoiser = df.load_denoiser(args.checkpoint)
        sched = df.make_schedule(cfg["diffusion.timesteps"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
        dataset = _diffusion_dataset(cfg)
        n = cfg["diffusion.samples"]
        toks = [dataset[i % len(dataset)].tokens for i in range(n)]
        samples = df.ddpm_sample_many(denoiser, toks, sched, rng, chunk=cfg["diffusion.sample_chunk"])
        metrics = []
        for i, tri in enumerate(samples):
            _triplane_previews(out, f"sample_{i:03d}", tri)
            metrics.append((f"consistency.{i:03d}", _fmt(df.cross_plane_consistency(tri))))
        mean = np.mean([df.cross_plane_consistency(t) for t in samples])
        metrics.append(("consistency.mean", _fmt(mean)))
        _write_metrics(os.path.join(out, "sample_metrics.txt"), metrics)
        print(f"mean cross-plane consistency {mean:.4f} over {len(samples)} samples")
        return 0

    if args.mode == "ablate":
        dataset = _diffusion_dataset(cfg)
        sched = df.make_schedule(cfg["diffusion.timesteps"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
        n = cfg["diffusion.samples"]
        toks = [dataset[i % len(dataset)].tokens for i in range(n)]
        scores = {}
        for label, use_oa in (("oa_on", True), ("oa_off", False)):
            train_cfg, model_cfg = _train_cfgs(cfg, use_oa)
            result = df.train_denoiser(dataset, train_cfg, model_cfg=model_cfg)
            samples = df.ddpm_sample_many(result.denoiser, toks, sched,
                                          np.random.default_rng(cfg["seed"]), chunk=cfg["diffusion.sample_chunk"])
            scores[label] = float(np.mean([df.cross_plane_consistency(t) for t in samples]))
        rel = (scores["oa_off"] - scores["oa_on"]) / scores["oa_off"] if scores["oa_off"] else 0.0
        print(f"{'config':10s} {'consistency':>12s}")
        print(f"{'oa_on':10s} {scores['oa_on']:12.5f}")
        print(f"{'oa_off':10s} {scores['oa_off']:12.5f}")
        print(f"relative improvement: {rel:.1%}")
        _write_metrics(os.path.join(out, "ablate_metrics.txt"), [
            ("consistency.oa_on", _fmt(scores["oa_on"])),
            ("consistency.oa_off", _fmt(scores["oa_off"])),
            ("relative_improvement", _fmt(rel)),
        ])
        return 0

    print(f"unknown diffusion mode {args.mode!r}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="trifield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=("all", "numerics", "attention", "renderer"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="corrupt one op's adjoint to validate the harness")
    p.set_defaults(fn=cmd_gradcheck)

    for name, fn, extra in (
        ("fit", cmd_fit, ()),
        ("render", cmd_render, ("checkpoint", "azimuth", "elevation", "size")),
        ("eval", cmd_eval, ("checkpoint",)),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if "checkpoint" in extra:
            p.add_argument("--checkpoint", required=True)
        if "azimuth" in extra:
            p.add_argument("--azimuth", required=True, help="degrees; comma-separated list allowed")
            p.add_argument("--elevation", type=float, default=20.0, help="degrees")
            p.add_argument("--size", type=int, default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("diffusion")
    p.add_argument("mode", choices=("train", "sample", "ablate"))
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_diffusion)

    return parser


def main(argv=None):
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .config import ConfigError

    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
