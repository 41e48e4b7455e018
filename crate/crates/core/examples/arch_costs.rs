//! Size of the search space and MAC/parameter counts of its extremes.

use udanas::space::{layer_plan, parse_si, resource_cost, SupernetSpec};

fn main() -> udanas::Result<()> {
    let spec = SupernetSpec::desk_default();
    println!("{} searchable nodes, {} configurations", spec.num_nodes(), spec.count_configurations());
    let budget = parse_si("2.5G")?;
    for (name, arch) in [("smallest", spec.smallest_arch()), ("largest", spec.largest_arch())] {
        let c = resource_cost(&spec, &arch, (256, 256))?;
        println!(
            "{name}: {}  {} MACs, {} params, within 2.5G: {}",
            arch.describe(&spec),
            c.flops,
            c.params,
            c.flops as f64 <= budget
        );
    }
    println!("layers of the largest network at 64x64:");
    for l in layer_plan(&spec, &spec.largest_arch(), (64, 64))? {
        let c = l.cost();
        println!("  {:<10} {:>10} MACs {:>7} params", l.name, c.flops, c.params);
    }
    Ok(())
}
