//! Runs the bundled 32-peer scenario and prints its report as a table.

use embchord::sim::scenario::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = Scenario::parse(include_str!("ring32.scn"))?;
    let report = sc.run(None)?;
    print!("{}", report.render_table());
    Ok(())
}
