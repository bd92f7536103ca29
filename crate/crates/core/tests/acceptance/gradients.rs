use plaid_core::denoiser::{BatchShape, Denoiser};
use plaid_core::model::ParamGroup;
use plaid_core::objective::{vlb_terms, ScheduleSource, VlbDraws};
use plaid_core::sampler::{guidance_gradient, guidance_logprob, guidance_logprob_grad};
use plaid_core::{GuidanceSpec, GuidanceTerm, Mat, Model, SelfCond, TokenBatch};

use crate::support::{rel_err, rng, tiny_model, Checks, Outcome};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn group_name(model: &Model, id: plaid_core::autograd::ParamId) -> &'static str {
    match model.group(id) {
        ParamGroup::Embedding => "embedding",
        ParamGroup::ScheduleEndpoint => "endpoints",
        ParamGroup::ScheduleInterior => "interior",
        ParamGroup::Denoiser => "denoiser",
    }
}

pub fn gradient_suite() -> Outcome {
    let mut c = Checks::default();
    let mut model = tiny_model(5, 3, 31);
    for (i, v) in model.params.get_mut(model.interior_id()).data.iter_mut().enumerate() {
        *v += 0.4 * ((i as f64) * 2.3).cos();
    }
    let scalars = model.params.num_scalars();
    c.check(scalars <= 1000, format!("{scalars} parameters"));
    let batch = TokenBatch::new(&[vec![1, 2, 3], vec![4, 0, 2], vec![3, 3, 1], vec![0, 1, 4], vec![2, 2, 0]]).unwrap();
    let mut r = rng(32);
    let draws = VlbDraws::sample(5, 3, model.config.embed_dim, 3, &mut r);
    let y = Mat::randn(15, model.config.embed_dim, 0.5, &mut r);
    let anneal = 0.6;
    let eval = |m: &Model, grad: bool| vlb_terms(m, ScheduleSource::Model, &batch, &draws, SelfCond::Given(&y), anneal, grad).unwrap();
    let grads = eval(&model, true).grads.unwrap();
    let mut worst: Vec<(&str, f64, usize)> = ["embedding", "denoiser", "endpoints", "interior"].iter().map(|n| (*n, 0.0, 0)).collect();
    let interior = model.interior_id();
    for id in model.params.ids() {
        let name = group_name(&model, id);
        for k in 0..model.params.get(id).len() {
            let f = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(id).data[k] += delta;
                let o = eval(&m, false);
                if id == interior {
                    o.interior_loss
                } else {
                    o.loss
                }
            };
            let num = (f(H) - f(-H)) / (2.0 * H);
            let e = rel_err(grads[id.0].data[k], num, 1e-6);
            let w = worst.iter_mut().find(|w| w.0 == name).unwrap();
            w.1 = w.1.max(e);
            w.2 += 1;
        }
    }
    for (name, e, n) in &worst {
        c.check(*e < TOL && *n > 0, format!("{name}: max rel err {e:.1e} over {n}"));
    }
    let emb_grad = &grads[model.embed_id().0];
    c.check(emb_grad.data.iter().any(|v| v.abs() > 1e-8), "embedding gradient nonzero");

    // guidance log-probability with respect to logits and to the latent
    let spec = GuidanceSpec::new(vec![
        GuidanceTerm::span(0, vec![1, 4]),
        GuidanceTerm::lexical(3).weighted(1.5),
        GuidanceTerm::lexical(0).negate(),
    ]);
    let logits = Mat::randn(4, 5, 1.0, &mut r);
    let (_, lg) = guidance_logprob_grad(&spec, &logits).unwrap();
    let mut worst_logits: f64 = 0.0;
    for k in 0..logits.len() {
        let mut p = logits.clone();
        p.data[k] += H;
        let mut m = logits.clone();
        m.data[k] -= H;
        let num = (guidance_logprob(&spec, &p).unwrap() - guidance_logprob(&spec, &m).unwrap()) / (2.0 * H);
        worst_logits = worst_logits.max(rel_err(lg.data[k], num, 1e-8));
    }
    c.check(worst_logits < TOL, format!("guidance wrt logits: {worst_logits:.1e}"));

    let gmodel = tiny_model(5, 4, 33);
    let z = Mat::randn(8, 4, 0.8, &mut r);
    let prev = Mat::randn(8, 4, 0.3, &mut r);
    let shape = BatchShape::full(vec![0.55, 0.55], 4);
    let gam = vec![gmodel.schedule().gamma(0.55).unwrap(); 2];
    let est = guidance_gradient(&gmodel, &z, &prev, &shape, &gam, 1.0, &spec).unwrap();
    let den = Denoiser::new(&gmodel);
    let total = |zz: &Mat| -> f64 {
        let l = den.denoise_logits(zz, &gam, &prev, &shape, 1.0).unwrap();
        (0..2).map(|ch| guidance_logprob(&spec, &Mat::from_vec(4, 5, l.data[ch * 20..(ch + 1) * 20].to_vec())).unwrap()).sum()
    };
    let mut worst_z: f64 = 0.0;
    for k in 0..z.len() {
        let mut p = z.clone();
        p.data[k] += H;
        let mut m = z.clone();
        m.data[k] -= H;
        worst_z = worst_z.max(rel_err(est.grad.data[k], (total(&p) - total(&m)) / (2.0 * H), 1e-8));
    }
    c.check(worst_z < TOL, format!("guidance wrt latent: {worst_z:.1e}"));
    c.outcome()
}
