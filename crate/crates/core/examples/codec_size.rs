//! Advertisement and envelope sizes, and fragmentation of one envelope over
//! a 64-byte MTU.

use embchord::advertisement::{encode_advertisement, parse_text, render_plain};
use embchord::envelope::{encode_envelope, MessageEnvelope, PayloadKind};
use embchord::id::{root_group, PeerId};
use embchord::transport::{fragment, Reassembler, REASSEMBLY_TIMEOUT_MS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for a in parse_text(include_str!("sample.adv"))? {
        let bin = encode_advertisement(&a)?.len();
        let txt = render_plain(&a).len();
        println!("{:<10} {bin:>4} B binary vs {txt:>4} B text ({:.2})", a.name, bin as f64 / txt as f64);
    }

    let src = PeerId::from_name(b"sender", 16)?;
    let dst = PeerId::from_name(b"receiver", 16)?;
    let env = MessageEnvelope::new(PayloadKind::PIPE_DATA, src, dst.0, root_group(16)?, vec![7u8; 270]);
    let bytes = encode_envelope(&env)?;
    let frags = fragment(1, &bytes, 64)?;
    println!("\n{}-byte envelope -> {} fragments over MTU 64", bytes.len(), frags.len());
    let mut re = Reassembler::new(REASSEMBLY_TIMEOUT_MS);
    for f in frags.into_iter().rev() {
        if let Some(whole) = re.insert(src, f, 0)? {
            println!("reassembled in reverse order: {}", whole == bytes);
        }
    }
    Ok(())
}
