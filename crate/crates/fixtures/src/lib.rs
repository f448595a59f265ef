//! Guest modules compiled from `guests/` and checked in so the host
//! workspace builds without a wasm toolchain. Rebuild with `guests/build.sh`.

macro_rules! guest {
    ($name:ident, $file:literal) => {
        pub const $name: &[u8] = include_bytes!(concat!("../../../guests/prebuilt/", $file, ".wasm"));
    };
}

guest!(NOOP, "noop");
guest!(ECHO, "echo");
guest!(SECRET, "secret");
guest!(HEAVY_INIT, "heavy_init");
guest!(DET, "det");
guest!(COUNTER, "counter");
guest!(HOSTCALLS, "hostcalls");
guest!(SGD_MAIN, "sgd_main");
guest!(WEIGHT_UPDATE, "weight_update");
guest!(DDO, "ddo");

/// Every fixture, by function name.
pub const ALL: &[(&str, &[u8])] = &[
    ("noop", NOOP),
    ("echo", ECHO),
    ("secret", SECRET),
    ("heavy_init", HEAVY_INIT),
    ("det", DET),
    ("counter", COUNTER),
    ("hostcalls", HOSTCALLS),
    ("sgd_main", SGD_MAIN),
    ("weight_update", WEIGHT_UPDATE),
    ("ddo", DDO),
];
