use std::collections::HashMap;
use dosegnn::graph::{build_graph, GraphConfig};
use dosegnn::model::gather_patches;
use dosegnn::phantom::{generate_dataset, PhantomConfig};

fn main() {
    let cfg = PhantomConfig { seed: 7, ..PhantomConfig::default() };
    let bundles = generate_dataset(&cfg, 3).unwrap();
    for (i, plan) in bundles.iter().enumerate() {
        let g = build_graph(&plan.ct.geom, &plan.dose_geom, &GraphConfig::with_threshold(5.0)).unwrap();
        let patches = gather_patches(&plan.ct, &g.ct_flat, 5);
        let plen = 125;
        let mut uniq: HashMap<Vec<u64>, u32> = HashMap::new();
        for row in patches.chunks_exact(plen) {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let next = uniq.len() as u32;
            uniq.entry(key).or_insert(next);
        }
        println!("plan {i}: {} nodes -> {} unique patches ({:.1}%)",
                 g.ct_flat.len(), uniq.len(), 100.0 * uniq.len() as f64 / g.ct_flat.len() as f64);
    }
}
