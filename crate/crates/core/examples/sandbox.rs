//! Compile and test code in the subprocess sandbox.
//!
//! cargo run --example sandbox

use alchemist::ingest::CodeBlock;
use alchemist::quality::{execute_code, ExecutorConfig, ExecutorRegistry, ResourceLimits};

fn main() {
    let executor = ExecutorRegistry::new(ExecutorConfig {
        limits: ResourceLimits { timeout_ms: 2_000, ..ResourceLimits::default() },
        ..ExecutorConfig::default()
    });
    let tests = vec!["assert fib(10) == 55".to_string()];
    let cases = [
        ("correct", "def fib(n):\n    a, b = 0, 1\n    for _ in range(n):\n        a, b = b, a + b\n    return a\n"),
        ("off by one", "def fib(n):\n    a, b = 0, 1\n    for _ in range(n - 1):\n        a, b = b, a + b\n    return a\n"),
        ("syntax", "def fib(n)\n    return n\n"),
        ("escape", "def fib(n):\n    open('/tmp/escaped.txt', 'w').write('x')\n    return 55\n"),
        ("runaway", "def fib(n):\n    while True:\n        pass\n"),
    ];
    for (name, code) in cases {
        let result = execute_code(&executor, &CodeBlock::tagged("python", code), Some(&tests));
        let last = result.stderr_excerpt.lines().last().unwrap_or("");
        println!("{name:<11} {:<13} {:<22} {last}", format!("{:?}", result.status), result.exit_info);
    }
}
