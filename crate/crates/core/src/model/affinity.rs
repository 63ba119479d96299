/// Length of the longest common prefix of the slash-separated components of
/// two affinity labels. An empty label is at distance 0 from anything.
///
/// Larger values mean closer placement.
pub fn affinity_distance(a: &str, b: &str) -> u32 {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    a.split('/').zip(b.split('/')).take_while(|(x, y)| x == y).count() as u32
}

/// `[A-Za-z0-9_-]+(/[A-Za-z0-9_-]+)*`
pub fn is_valid_affinity(label: &str) -> bool {
    !label.is_empty()
        && label.split('/').all(|part| {
            !part.is_empty()
                && part
                    .bytes()
                    .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
        })
}

/// First component of a label; the bandwidth matrix is indexed by it.
pub fn site_of(label: &str) -> &str {
    label.split('/').next().unwrap_or("")
}
