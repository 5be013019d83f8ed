//! Subprocess code execution with per-language command templates.
//!
//! Every run gets a fresh temporary directory as its working directory and
//! `HOME`, a cleared environment, wall-clock and CPU limits, an address-space
//! and file-size cap, and capped output capture. Python runs additionally go
//! through an audit-hook guard that refuses writes outside the sandbox
//! directory, network access and process spawning; when `unshare` is usable
//! the process also runs in an empty network namespace.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::ingest::CodeBlock;
use crate::syntax::{self, SyntaxError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecStatus {
    Success,
    CompileError,
    RuntimeError,
    TestFailure,
    Timeout,
    ExecutorUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    pub stderr_excerpt: String,
    pub exit_info: String,
}

impl ExecutionResult {
    fn new(status: ExecStatus, stderr: &str, exit_info: impl Into<String>) -> Self {
        ExecutionResult { status, stderr_excerpt: excerpt(stderr), exit_info: exit_info.into() }
    }
}

fn excerpt(text: &str) -> String {
    const MAX: usize = 2000;
    let trimmed = text.trim();
    if trimmed.chars().count() <= MAX {
        return trimmed.to_string();
    }
    // keep the tail: tracebacks end with the error line
    let skip = trimmed.chars().count() - MAX;
    format!("...{}", trimmed.chars().skip(skip).collect::<String>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceLimits {
    pub timeout_ms: u64,
    pub output_cap_bytes: usize,
    pub memory_mb: u64,
    pub max_file_mb: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits { timeout_ms: 10_000, output_cap_bytes: 64 * 1024, memory_mb: 1024, max_file_mb: 16 }
    }
}

/// Command templates for one language. Placeholders: `{file}` (source path),
/// `{dir}` (sandbox directory), `{guard}` (python guard script).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorSpec {
    pub extension: String,
    /// Syntax/compile check; always run first.
    pub compile: Vec<String>,
    /// Runs the program with tests appended; used only when tests are supplied.
    pub run: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    /// Replace execution with a grammar parse.
    pub dry_run: bool,
    pub limits: ResourceLimits,
    pub max_concurrent: usize,
    pub isolate_network: bool,
    pub languages: BTreeMap<String, ExecutorSpec>,
}

fn argv(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        let mut languages = BTreeMap::new();
        languages.insert(
            "python".into(),
            ExecutorSpec {
                extension: "py".into(),
                compile: argv(&[
                    "python3",
                    "-I",
                    "-c",
                    "import sys; compile(open(sys.argv[1], encoding='utf-8').read(), sys.argv[1], 'exec')",
                    "{file}",
                ]),
                run: argv(&["python3", "-I", "{guard}", "{file}"]),
            },
        );
        languages.insert(
            "javascript".into(),
            ExecutorSpec { extension: "js".into(), compile: argv(&["node", "--check", "{file}"]), run: argv(&["node", "{file}"]) },
        );
        languages.insert(
            "cpp".into(),
            ExecutorSpec {
                extension: "cpp".into(),
                compile: argv(&["g++", "-std=c++17", "-fsyntax-only", "{file}"]),
                run: argv(&["sh", "-c", "g++ -std=c++17 -O0 -o {dir}/prog {file} && {dir}/prog"]),
            },
        );
        languages.insert(
            "c".into(),
            ExecutorSpec {
                extension: "c".into(),
                compile: argv(&["gcc", "-fsyntax-only", "{file}"]),
                run: argv(&["sh", "-c", "gcc -O0 -o {dir}/prog {file} && {dir}/prog"]),
            },
        );
        ExecutorConfig {
            dry_run: false,
            limits: ResourceLimits::default(),
            max_concurrent: 4,
            isolate_network: true,
            languages,
        }
    }
}

/// Capability used by the quality filter.
pub trait CodeExecutor: Send + Sync {
    fn supports(&self, language: &str) -> bool;
    fn execute(&self, block: &CodeBlock, tests: Option<&[String]>) -> ExecutionResult;
}

const PYTHON_GUARD: &str = r#"import os, sys, runpy
_root = os.path.realpath(os.getcwd())
_WRITE = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
def _inside(p):
    try:
        p = os.fsdecode(p)
    except TypeError:
        return True
    r = os.path.realpath(p)
    return r == _root or r.startswith(_root + os.sep)
def _hook(event, args):
    if event == "open":
        path, mode, flags = args
        writing = (mode is not None and any(c in str(mode) for c in "wax+")) or (isinstance(flags, int) and flags & _WRITE)
        if writing and not isinstance(path, int) and not _inside(path):
            raise PermissionError("sandbox: write outside sandbox refused: %r" % (path,))
    elif event in ("os.remove", "os.rmdir", "os.mkdir", "os.chmod", "os.chown", "os.truncate", "shutil.rmtree", "os.utime"):
        if args and not isinstance(args[0], int) and not _inside(args[0]):
            raise PermissionError("sandbox: %s outside sandbox refused" % event)
    elif event in ("os.rename", "os.link", "os.symlink", "shutil.move", "shutil.copyfile"):
        if any(not isinstance(a, int) and isinstance(a, (str, bytes, os.PathLike)) and not _inside(a) for a in args[:2]):
            raise PermissionError("sandbox: %s outside sandbox refused" % event)
    elif event.startswith("socket.") and event not in ("socket.__new__", "socket.gethostname"):
        raise PermissionError("sandbox: network access refused")
    elif event in ("subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork", "os.forkpty", "pty.spawn", "ctypes.dlopen"):
        raise PermissionError("sandbox: %s refused" % event)
sys.addaudithook(_hook)
_target = sys.argv[1]
sys.argv = sys.argv[1:]
runpy.run_path(_target, run_name="__main__")
"#;

struct Semaphore {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut count = self.count.lock().expect("semaphore");
        while self.max > 0 && *count >= self.max {
            count = self.freed.wait(count).expect("semaphore");
        }
        *count += 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.count.lock().expect("semaphore") -= 1;
        self.sem.freed.notify_one();
    }
}

fn unshare_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        Command::new("unshare")
            .args(["-rn", "true"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .is_ok_and(|s| s.success())
    })
}

fn program_available(program: &str) -> bool {
    if program.contains('/') {
        return Path::new(program).exists();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

/// Registered executors plus the sandbox policy.
pub struct ExecutorRegistry {
    config: ExecutorConfig,
    slots: Semaphore,
}

struct RunOutput {
    status: Option<std::process::ExitStatus>,
    stderr: String,
    timed_out: bool,
}

impl ExecutorRegistry {
    pub fn new(config: ExecutorConfig) -> Self {
        let max = config.max_concurrent;
        ExecutorRegistry { config, slots: Semaphore { count: Mutex::new(0), freed: Condvar::new(), max } }
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    fn run_command(&self, template: &[String], dir: &Path, file: &Path, guard: &Path) -> std::io::Result<RunOutput> {
        let fill = |s: &String| {
            s.replace("{file}", &file.display().to_string())
                .replace("{dir}", &dir.display().to_string())
                .replace("{guard}", &guard.display().to_string())
        };
        let mut args: Vec<String> = template.iter().map(fill).collect();
        if self.config.isolate_network && unshare_available() {
            args.splice(0..0, ["unshare".to_string(), "-rn".to_string(), "--".to_string()]);
        }
        let limits = self.config.limits.clone();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..])
            .current_dir(dir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", dir)
            .env("TMPDIR", dir)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let cpu_secs = limits.timeout_ms / 1000 + 2;
        let memory = limits.memory_mb * 1024 * 1024;
        let fsize = limits.max_file_mb * 1024 * 1024;
        unsafe {
            cmd.pre_exec(move || {
                set_limit(libc::RLIMIT_CPU, cpu_secs);
                set_limit(libc::RLIMIT_AS, memory);
                set_limit(libc::RLIMIT_FSIZE, fsize);
                Ok(())
            });
        }
        let mut child = cmd.spawn()?;
        let cap = limits.output_cap_bytes;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || read_capped(&mut stdout, cap));
        let err_reader = std::thread::spawn(move || read_capped(&mut stderr, cap));

        let timeout = Duration::from_millis(limits.timeout_ms);
        let (status, timed_out) = match child.wait_timeout(timeout)? {
            Some(status) => (Some(status), false),
            None => {
                // the child leads its own process group; kill the whole group
                unsafe {
                    libc::kill(-(child.id() as i32), libc::SIGKILL);
                }
                let _ = child.kill();
                let _ = child.wait();
                (None, true)
            }
        };
        let _ = out_reader.join();
        let stderr = err_reader.join().unwrap_or_default();
        Ok(RunOutput { status, stderr, timed_out })
    }

    fn dry_run(&self, block: &CodeBlock) -> ExecutionResult {
        match syntax::check_syntax(&block.code, &block.language) {
            Ok(()) => ExecutionResult::new(ExecStatus::Success, "", "dry-run: parse only"),
            Err(SyntaxError::NoGrammar(l)) => {
                ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("dry-run: no grammar for {l}"))
            }
            Err(e) => ExecutionResult::new(ExecStatus::CompileError, &e.to_string(), "dry-run: parse failed"),
        }
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) {
    let lim = libc::rlimit { rlim_cur: value as libc::rlim_t, rlim_max: value as libc::rlim_t };
    unsafe {
        libc::setrlimit(resource, &lim);
    }
}

fn read_capped(reader: &mut impl Read, cap: usize) -> String {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    String::from_utf8_lossy(&kept).into_owned()
}

impl CodeExecutor for ExecutorRegistry {
    fn supports(&self, language: &str) -> bool {
        if self.config.dry_run {
            syntax::has_grammar(language)
        } else {
            self.config
                .languages
                .get(language)
                .is_some_and(|spec| spec.compile.first().is_some_and(|p| program_available(p)))
        }
    }

    fn execute(&self, block: &CodeBlock, tests: Option<&[String]>) -> ExecutionResult {
        if self.config.dry_run {
            return self.dry_run(block);
        }
        let Some(spec) = self.config.languages.get(&block.language) else {
            return ExecutionResult::new(
                ExecStatus::ExecutorUnavailable,
                "",
                format!("no executor registered for `{}`", block.language),
            );
        };
        if !self.supports(&block.language) {
            return ExecutionResult::new(
                ExecStatus::ExecutorUnavailable,
                "",
                format!("toolchain `{}` not found", spec.compile.first().map_or("", String::as_str)),
            );
        }

        let _slot = self.slots.acquire();
        let sandbox = match tempfile::Builder::new().prefix("alchemist-exec-").tempdir() {
            Ok(dir) => dir,
            Err(e) => return ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("sandbox dir: {e}")),
        };
        let dir = sandbox.path().canonicalize().unwrap_or_else(|_| sandbox.path().to_path_buf());
        let file = dir.join(format!("main.{}", spec.extension));
        let guard = dir.join("_guard.py");
        let write = std::fs::write(&file, &block.code).and_then(|_| std::fs::write(&guard, PYTHON_GUARD));
        if let Err(e) = write {
            return ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("sandbox write: {e}"));
        }

        let limit_ms = self.config.limits.timeout_ms;
        let compiled = match self.run_command(&spec.compile, &dir, &file, &guard) {
            Ok(out) => out,
            Err(e) => return ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("spawn failed: {e}")),
        };
        if compiled.timed_out {
            return ExecutionResult::new(ExecStatus::Timeout, &compiled.stderr, format!("compile timed out after {limit_ms} ms"));
        }
        let code = compiled.status.and_then(|s| s.code());
        if code != Some(0) {
            return ExecutionResult::new(ExecStatus::CompileError, &compiled.stderr, format!("compile exit {code:?}"));
        }

        let tests = match tests {
            Some(tests) if !tests.is_empty() => tests,
            _ => return ExecutionResult::new(ExecStatus::Success, "", "compile ok; no tests"),
        };
        let program = format!("{}\n\n{}\n", block.code, tests.join("\n"));
        if let Err(e) = std::fs::write(&file, program) {
            return ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("sandbox write: {e}"));
        }
        let ran = match self.run_command(&spec.run, &dir, &file, &guard) {
            Ok(out) => out,
            Err(e) => return ExecutionResult::new(ExecStatus::ExecutorUnavailable, "", format!("spawn failed: {e}")),
        };
        if ran.timed_out {
            return ExecutionResult::new(ExecStatus::Timeout, &ran.stderr, format!("timeout after {limit_ms} ms"));
        }
        match ran.status.and_then(|s| s.code()) {
            Some(0) => ExecutionResult::new(ExecStatus::Success, &ran.stderr, "exit 0"),
            code => {
                let status = if ran.stderr.contains("AssertionError") || ran.stderr.contains("Assertion") {
                    ExecStatus::TestFailure
                } else {
                    ExecStatus::RuntimeError
                };
                let info = match code {
                    Some(c) => format!("exit {c}"),
                    None => "killed by signal".to_string(),
                };
                ExecutionResult::new(status, &ran.stderr, info)
            }
        }
    }
}

/// Run one block through a registry.
pub fn execute_code(executor: &dyn CodeExecutor, block: &CodeBlock, tests: Option<&[String]>) -> ExecutionResult {
    executor.execute(block, tests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ExecutorRegistry {
        ExecutorRegistry::new(ExecutorConfig {
            limits: ResourceLimits { timeout_ms: 5_000, ..ResourceLimits::default() },
            ..ExecutorConfig::default()
        })
    }

    fn py(code: &str) -> CodeBlock {
        CodeBlock::tagged("python", code)
    }

    #[test]
    fn valid_code_without_tests() {
        assert_eq!(execute_code(&registry(), &py("a=1"), None).status, ExecStatus::Success);
    }

    #[test]
    fn malformed_code_fails_compile() {
        let r = execute_code(&registry(), &py("def f(: pass"), None);
        assert_eq!(r.status, ExecStatus::CompileError);
        assert!(r.stderr_excerpt.contains("SyntaxError"), "{}", r.stderr_excerpt);
    }

    #[test]
    fn tests_distinguish_correct_from_buggy() {
        let tests = vec!["assert add(2,3)==5".to_string()];
        let good = execute_code(&registry(), &py("def add(a, b):\n    return a + b"), Some(&tests));
        let bad = execute_code(&registry(), &py("def add(a, b):\n    return a - b"), Some(&tests));
        assert_eq!(good.status, ExecStatus::Success);
        assert_eq!(bad.status, ExecStatus::TestFailure);
    }

    #[test]
    fn runtime_error_with_tests() {
        let tests = vec!["f()".to_string()];
        let r = execute_code(&registry(), &py("def f():\n    return undefined_name"), Some(&tests));
        assert_eq!(r.status, ExecStatus::RuntimeError);
        assert!(r.stderr_excerpt.contains("NameError"));
    }

    #[test]
    fn timeout_reports_limit() {
        let reg = ExecutorRegistry::new(ExecutorConfig {
            limits: ResourceLimits { timeout_ms: 400, ..ResourceLimits::default() },
            ..ExecutorConfig::default()
        });
        let tests = vec!["spin()".to_string()];
        let r = execute_code(&reg, &py("def spin():\n    while True:\n        pass"), Some(&tests));
        assert_eq!(r.status, ExecStatus::Timeout);
        assert!(r.exit_info.contains("400"));
    }

    #[test]
    fn unknown_language_unavailable() {
        let r = execute_code(&registry(), &CodeBlock::tagged("cobol", "DISPLAY 'X'."), None);
        assert_eq!(r.status, ExecStatus::ExecutorUnavailable);
    }

    #[test]
    fn dry_run_parses_only() {
        let reg = ExecutorRegistry::new(ExecutorConfig { dry_run: true, ..ExecutorConfig::default() });
        assert_eq!(execute_code(&reg, &py("a=1"), None).status, ExecStatus::Success);
        assert_eq!(execute_code(&reg, &py("def f(: pass"), None).status, ExecStatus::CompileError);
        assert_eq!(
            execute_code(&reg, &CodeBlock::tagged("cobol", "x"), None).status,
            ExecStatus::ExecutorUnavailable
        );
    }

    #[test]
    fn output_cap() {
        let mut data = std::io::Cursor::new(vec![b'x'; 100_000]);
        assert_eq!(read_capped(&mut data, 10).len(), 10);
    }
}
