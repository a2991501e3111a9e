use crate::kgstore::Triple;

/// Where an object class is usually found.
pub fn location_of(class: &str) -> &'static str {
    match class {
        "table" | "cabinet" | "cup" => "kitchen",
        "desk" => "office",
        "monitor" | "keyboard" => "desk",
        "bed" => "bedroom",
        _ => "room",
    }
}

/// One `AtLocation` edge per class, a cyclic `Antonym` edge per color, and
/// `RelatedTo` between classes that share a location (earlier → later).
pub fn build_synthetic_kg(classes: &[&str], colors: &[&str]) -> Vec<Triple> {
    let mut out = Vec::new();
    for c in classes {
        out.push(Triple::new(*c, "AtLocation", location_of(c), 1.0));
    }
    if colors.len() >= 2 {
        for (i, c) in colors.iter().enumerate() {
            out.push(Triple::new(*c, "Antonym", colors[(i + 1) % colors.len()], 1.0));
        }
    }
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            if location_of(a) == location_of(b) {
                out.push(Triple::new(*a, "RelatedTo", *b, 1.0));
            }
        }
    }
    out
}

/// Every token the KG embedding table must cover.
pub(crate) fn kg_vocabulary(triples: &[Triple]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for t in triples {
        for tok in [&t.head, &t.relation, &t.tail] {
            if seen.insert(tok.clone()) {
                out.push(tok.clone());
            }
        }
    }
    out
}
