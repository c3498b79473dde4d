//! Shared helpers for unit tests.

use std::sync::OnceLock;

/// Installs a process-wide panic hook that silences expected
/// memory-corruption panics (the poisoned-free traps under test) while
/// delegating everything else to the default hook. Installing once and
/// never restoring keeps this safe under parallel test execution.
pub(crate) fn quiet_corruption_panics() {
    static HOOK: OnceLock<()> = OnceLock::new();
    HOOK.get_or_init(|| {
        let default = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            let msg = info.payload().downcast_ref::<String>().map(String::as_str);
            if msg.is_some_and(|m| m.contains("memory corruption")) {
                return;
            }
            default(info);
        }));
    });
}

/// Tiny deterministic RNG for oracle replays.
pub(crate) struct SplitMix(pub u64);

impl SplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, m: u64) -> u64 {
        self.next() % m
    }
}
