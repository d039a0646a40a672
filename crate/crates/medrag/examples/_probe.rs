use medrag::harness::*;
use medrag::harness::poison::*;
use medrag::generator::*;
use medrag::kb::*;
use rand::SeedableRng;

fn main() {
    let cfg = ExperimentConfig { seed: 11, n: 40, dim: 32, ..ExperimentConfig::default() };
    let (bench, kb, model) = synth_benchmark_with(cfg.seed, cfg.n, cfg.dim, cfg.noise_level, &cfg.pipeline, cfg.stealth_eps).unwrap();
    let queries = attacker_query_sample(&bench, &kb, 8, 11).unwrap();
    let ctx = AttackerContext { model: &model, queries: &queries, target_answer: "No".into() };
    // find a probe instance answered Yes
    for inst in bench.eval_split() {
        let q = instance_query(inst, kb.text_encoder(), kb.image_encoder()).unwrap();
        let context = retrieve_context(&q, &kb, &cfg.pipeline).unwrap();
        if context.is_empty() { continue; }
        if model.generate(&q, &context).unwrap() != "Yes" { continue; }
        let logits = model.logits(&q, &context).unwrap();
        println!("clean logits: {:?} ctx size {}", logits, context.len());
        let base_id = context[0].id.clone();
        let strong = AttackSettings { stealth_fit: false, ..AttackSettings::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for iters in [300usize, 600, 1200, 2400] {
            let draft = craft_injection(CraftKind::GeneratorPush, &base_id, &kb, &ctx, &strong, iters, "diag-gen", 1, &mut rng).unwrap();
            let mut kb3 = kb.clone();
            kb3.set_stealth_eps(f64::INFINITY).unwrap();
            kb3.submit_injection(draft, &base_id).unwrap();
            let swapped: Vec<&KBEntry> = context.iter().map(|e| if e.id == base_id { kb3.get("diag-gen").unwrap() } else { *e }).collect();
            let l2 = model.logits(&q, &swapped).unwrap();
            let tnorm = kb3.get("diag-gen").unwrap().text_emb.l2_norm();
            println!("iters {iters}: swapped logits {:?} answer {} tnorm {:.2}", l2, model.generate(&q, &swapped).unwrap(), tnorm);
        }
        break;
    }
}
