//! The stack may reach the network only through `LcdNic`: no fabric types,
//! no concrete NIC, and nothing on the trait beyond frame bursts and the
//! static configuration.

const STACK_SOURCES: &[(&str, &str)] = &[
    ("engine.rs", include_str!("../src/engine.rs")),
    ("channel.rs", include_str!("../src/channel.rs")),
    ("transport.rs", include_str!("../src/transport.rs")),
    ("handshake.rs", include_str!("../src/handshake.rs")),
    ("wire.rs", include_str!("../src/wire.rs")),
];

fn code_lines(src: &str) -> impl Iterator<Item = &str> {
    src.lines().map(str::trim).filter(|l| !l.starts_with("//"))
}

#[test]
fn stack_modules_do_not_touch_the_fabric() {
    for (name, src) in STACK_SOURCES {
        for line in code_lines(src) {
            assert!(!line.contains("fabric::") && !line.contains("crate::fabric"), "{name}: {line}");
            assert!(!line.contains("toeplitz") && !line.contains("oracle_"), "{name}: {line}");
        }
    }
}

#[test]
fn engine_sees_only_the_trait() {
    let engine = STACK_SOURCES[0].1;
    assert!(engine.contains("Arc<dyn LcdNic>"));
    for line in code_lines(engine) {
        assert!(!line.contains("Arc<Nic>") && !line.contains("rx_occupancy"), "{line}");
    }
}

#[test]
fn nic_trait_is_minimal() {
    let src = include_str!("../src/lcd_nic.rs");
    let start = src.find("pub trait LcdNic").unwrap();
    let body = &src[start..start + src[start..].find("\n}").unwrap()];
    let mut methods: Vec<&str> = code_lines(body)
        .filter_map(|l| l.strip_prefix("fn "))
        .map(|l| &l[..l.find('(').unwrap()])
        .collect();
    methods.sort_unstable();
    assert_eq!(methods, ["config", "num_queues", "rx_burst", "tx_burst"]);
    let config = &src[src.find("pub struct NicConfig").unwrap()..];
    let config = &config[..config.find('}').unwrap()];
    for forbidden in ["key", "indirection", "table", "hash"] {
        assert!(!config.contains(forbidden), "NicConfig exposes {forbidden}");
    }
}
