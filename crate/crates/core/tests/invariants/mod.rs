//! Property suites shared by the core test target and the acceptance runner.
//! Each property is a plain function that runs its own 1000 cases and panics
//! on a counterexample; `registry!` lists them and, under the test harness,
//! wraps each in a `#[test]`.

macro_rules! registry {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const ALL: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod wrappers {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}

pub mod data;
pub mod pipeline;

/// Named properties of one suite.
pub type Suite = &'static [(&'static str, fn())];

/// Every suite, in a fixed order.
#[allow(dead_code)]
pub fn suites() -> [(&'static str, Suite); 3] {
    [("numeric", numeric::ALL), ("data", data::ALL), ("pipeline", pipeline::ALL)]
}
