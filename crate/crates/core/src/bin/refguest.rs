//! Reference guest: a line-oriented JSON worker used by the test suite and
//! the benchmark harness.
//!
//! Request handling avoids heap allocation on the hot path so that the pages
//! a request writes are exactly the pages the command asks for: input is
//! read into one buffer allocated at startup, parsed without copying, and
//! responses are formatted into a static buffer.

use std::io::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::value::RawValue;

const INPUT_CAP: usize = 4 << 20;
const OUTPUT_CAP: usize = 1 << 20;
const SCAN_CHUNK: usize = 1 << 20;
const MAX_TRACKED: usize = 4096;

static STOP_THREADS: AtomicBool = AtomicBool::new(false);
static HEARTBEATS: AtomicU64 = AtomicU64::new(0);

#[derive(Deserialize)]
struct Request<'a> {
    #[serde(borrow)]
    id: &'a RawValue,
    #[serde(borrow, default)]
    value: Option<&'a RawValue>,
}

#[derive(Deserialize, Default)]
struct Cmd<'a> {
    #[serde(borrow, default)]
    op: Option<&'a str>,
    dirty: Option<u64>,
    #[serde(borrow, default)]
    pages: Option<&'a RawValue>,
    addr: Option<u64>,
    #[serde(borrow, default)]
    prot: Option<&'a str>,
    #[serde(borrow, default)]
    token: Option<&'a str>,
    bytes: Option<u64>,
    ms: Option<u64>,
    code: Option<i32>,
}

struct Region {
    addr: u64,
    pages: u64,
}

struct Guest {
    page_size: u64,
    arena: *mut u8,
    arena_pages: u64,
    spare_unmap: Region,
    spare_protect: Region,
    spare_file: Region,
    mem_fd: i32,
    done_fd: Option<i32>,
    /// Arena page indices written by the last write command.
    written: [u64; MAX_TRACKED],
    written_len: usize,
    written_total: u64,
    secret: Option<&'static mut [u8]>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

/// Fixed-capacity response writer over a static buffer.
struct Out {
    buf: &'static mut [u8],
    len: usize,
}

impl std::io::Write for Out {
    fn write(&mut self, data: &[u8]) -> std::io::Result<usize> {
        let n = data.len().min(self.buf.len() - self.len);
        self.buf[self.len..self.len + n].copy_from_slice(&data[..n]);
        self.len += n;
        if n < data.len() {
            return Err(std::io::Error::new(std::io::ErrorKind::WriteZero, "response too large"));
        }
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn leak_buffer(len: usize) -> &'static mut [u8] {
    Box::leak(vec![0u8; len].into_boxed_slice())
}

fn map_anon(pages: u64, page_size: u64, prot: i32) -> *mut u8 {
    // SAFETY: fresh private anonymous mapping owned by this process.
    let p = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            (pages * page_size) as usize,
            prot,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        eprintln!("refguest: mmap of {pages} pages failed: {}", std::io::Error::last_os_error());
        std::process::exit(1);
    }
    p as *mut u8
}

fn touch(p: *mut u8, pages: u64, page_size: u64, fill: u8) {
    for i in 0..pages {
        // SAFETY: p points to `pages` writable pages.
        unsafe { std::ptr::write_volatile(p.add((i * page_size) as usize), fill) };
    }
}

fn parse_prot(s: &str) -> Option<i32> {
    let mut prot = libc::PROT_NONE;
    for c in s.chars() {
        prot |= match c {
            'r' => libc::PROT_READ,
            'w' => libc::PROT_WRITE,
            'x' => libc::PROT_EXEC,
            '-' => 0,
            _ => return None,
        };
    }
    Some(prot)
}

/// Iterates the unsigned integers of a JSON array without allocating.
fn for_each_index(raw: &RawValue, mut f: impl FnMut(u64)) -> bool {
    let text = raw.get().trim();
    let Some(inner) = text.strip_prefix('[').and_then(|t| t.strip_suffix(']')) else {
        return false;
    };
    for item in inner.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        match item.parse() {
            Ok(v) => f(v),
            Err(_) => return false,
        }
    }
    true
}

fn find_bytes(hay: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    let first = needle[0];
    let mut i = 0;
    while i + needle.len() <= hay.len() {
        let at = i + hay[i..hay.len() - needle.len() + 1].iter().position(|&b| b == first)?;
        if &hay[at..at + needle.len()] == needle {
            return Some(at);
        }
        i = at + 1;
    }
    None
}

impl Guest {
    fn new(arena_pages: u64, done_fd: bool) -> Guest {
        // SAFETY: sysconf has no preconditions.
        let page_size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as u64;
        let rw = libc::PROT_READ | libc::PROT_WRITE;
        let arena = map_anon(arena_pages.max(1), page_size, rw);
        touch(arena, arena_pages, page_size, 0x5a);
        let unmap = map_anon(8, page_size, rw);
        touch(unmap, 8, page_size, 0xa1);
        let protect = map_anon(4, page_size, rw);
        touch(protect, 4, page_size, 0xb2);
        let spare_file = map_exe_page(page_size);
        let mem_fd = {
            let path = c"/proc/self/mem";
            // SAFETY: valid C string; descriptor kept for the process lifetime.
            unsafe { libc::open(path.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC) }
        };
        Guest {
            page_size,
            arena,
            arena_pages,
            spare_unmap: Region { addr: unmap as u64, pages: 8 },
            spare_protect: Region { addr: protect as u64, pages: 4 },
            spare_file,
            mem_fd,
            done_fd: done_fd.then_some(3),
            written: [0; MAX_TRACKED],
            written_len: 0,
            written_total: 0,
            secret: None,
            threads: Vec::new(),
        }
    }

    fn record_write(&mut self, page: u64) {
        if self.written_len < MAX_TRACKED {
            self.written[self.written_len] = page;
            self.written_len += 1;
        }
        self.written_total += 1;
    }

    fn write_arena_page(&mut self, page: u64, word: u64) {
        // SAFETY: page < arena_pages, checked by callers.
        unsafe {
            std::ptr::write_volatile(self.arena.add((page * self.page_size) as usize) as *mut u64, word)
        };
    }

    fn bench(&mut self, dirty: u64, out: &mut Out) -> std::io::Result<()> {
        let dirty = dirty.min(self.arena_pages);
        self.written_len = 0;
        self.written_total = 0;
        let stamp = HEARTBEATS.fetch_add(1, Ordering::Relaxed) ^ 0x9e37_79b9_7f4a_7c15;
        for i in 0..dirty {
            self.write_arena_page(i, stamp.wrapping_add(i));
            self.record_write(i);
        }
        let mut sum = 0u64;
        for i in 0..self.arena_pages {
            // SAFETY: i < arena_pages.
            sum = sum.wrapping_add(unsafe {
                std::ptr::read_volatile(self.arena.add((i * self.page_size) as usize) as *const u64)
            });
        }
        write!(out, r#"{{"ok":true,"dirty":{dirty},"sum":{sum}}}"#)
    }

    fn write_pages(&mut self, pages: &RawValue, out: &mut Out) -> std::io::Result<()> {
        self.written_len = 0;
        self.written_total = 0;
        let limit = self.arena_pages;
        let mut bad = false;
        let mut list = [0u64; MAX_TRACKED];
        let mut n = 0;
        let ok = for_each_index(pages, |p| {
            if p >= limit || n >= MAX_TRACKED {
                bad = true;
            } else {
                list[n] = p;
                n += 1;
            }
        });
        if !ok || bad {
            return write!(out, r#"{{"error":"bad page list"}}"#);
        }
        for &p in &list[..n] {
            self.write_arena_page(p, 0xfeed_0000 + p);
            self.record_write(p);
        }
        write!(out, r#"{{"ok":true,"written":{n}}}"#)
    }

    fn report_writes(&self, out: &mut Out) -> std::io::Result<()> {
        write!(out, r#"{{"arena":{},"pages":["#, self.arena as u64)?;
        for (i, p) in self.written[..self.written_len].iter().enumerate() {
            if i > 0 {
                out.write_all(b",")?;
            }
            write!(out, "{}", self.arena as u64 + p * self.page_size)?;
        }
        write!(out, r#"],"count":{}}}"#, self.written_total)
    }

    fn info(&self, out: &mut Out) -> std::io::Result<()> {
        // SAFETY: trivial libc queries.
        let (pid, uid, brk) = unsafe { (libc::getpid(), libc::getuid(), libc::sbrk(0) as u64) };
        let threads = std::fs::read_dir("/proc/self/task").map(|d| d.count()).unwrap_or(0);
        write!(
            out,
            r#"{{"pid":{pid},"uid":{uid},"threads":{threads},"page_size":{},"arena":{},"arena_pages":{},"brk":{brk},"spare_unmap":{{"addr":{},"pages":{}}},"spare_protect":{{"addr":{},"pages":{}}},"spare_file":{{"addr":{},"pages":{}}},"heartbeats":{}}}"#,
            self.page_size,
            self.arena as u64,
            self.arena_pages,
            self.spare_unmap.addr,
            self.spare_unmap.pages,
            self.spare_protect.addr,
            self.spare_protect.pages,
            self.spare_file.addr,
            self.spare_file.pages,
            HEARTBEATS.load(Ordering::Relaxed),
        )
    }

    fn spare_pages(&self, addr: u64) -> u64 {
        [&self.spare_unmap, &self.spare_protect, &self.spare_file]
            .into_iter()
            .find(|r| r.addr == addr)
            .map_or(1, |r| r.pages)
    }

    fn find_secret(&self, token: &str, exclude: &[std::ops::Range<u64>], out: &mut Out) -> std::io::Result<()> {
        static mut MAPS: [u8; 1 << 18] = [0; 1 << 18];
        static mut CHUNK: [u8; SCAN_CHUNK] = [0; SCAN_CHUNK];
        // SAFETY: the guest's request loop is single-threaded; these buffers
        // are only touched here.
        let (maps, chunk) = unsafe { (&mut *std::ptr::addr_of_mut!(MAPS), &mut *std::ptr::addr_of_mut!(CHUNK)) };
        let chunk_range = chunk.as_ptr() as u64..chunk.as_ptr() as u64 + SCAN_CHUNK as u64;
        let maps_range = maps.as_ptr() as u64..maps.as_ptr() as u64 + maps.len() as u64;
        let needle = token.as_bytes();
        let maps_len = {
            let path = c"/proc/self/maps";
            // SAFETY: reading into our static buffer.
            unsafe {
                let fd = libc::open(path.as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC);
                let mut total = 0usize;
                loop {
                    let n = libc::read(fd, maps.as_mut_ptr().add(total) as *mut _, maps.len() - total);
                    if n <= 0 {
                        break;
                    }
                    total += n as usize;
                }
                libc::close(fd);
                total
            }
        };
        let text = std::str::from_utf8(&maps[..maps_len]).unwrap_or("");
        let mut hits = 0u64;
        let mut scanned = 0u64;
        for line in text.lines() {
            let mut fields = line.split_whitespace();
            let (Some(range), Some(perms)) = (fields.next(), fields.next()) else { continue };
            if !perms.starts_with('r') || line.contains("[vvar") || line.contains("[vsyscall]") {
                continue;
            }
            let Some((a, b)) = range.split_once('-') else { continue };
            let (Ok(start), Ok(end)) = (u64::from_str_radix(a, 16), u64::from_str_radix(b, 16)) else {
                continue;
            };
            let mut at = start;
            while at < end {
                let len = ((end - at) as usize).min(SCAN_CHUNK);
                // SAFETY: pread into our static buffer.
                let n = unsafe { libc::pread(self.mem_fd, chunk.as_mut_ptr() as *mut _, len, at as i64) };
                if n <= 0 {
                    break;
                }
                let n = n as usize;
                scanned += n as u64;
                let mut off = 0;
                while let Some(pos) = find_bytes(&chunk[off..n], needle) {
                    let addr = at + (off + pos) as u64;
                    let excluded = exclude.iter().chain([&chunk_range, &maps_range]).any(|r| r.contains(&addr));
                    if !excluded {
                        hits += 1;
                    }
                    off += pos + 1;
                }
                // overlap so a token spanning chunks is still seen
                let step = if n > needle.len() { n - needle.len() + 1 } else { n };
                at += step as u64;
                if n < len {
                    break;
                }
            }
        }
        write!(out, r#"{{"found":{},"hits":{hits},"scanned":{scanned}}}"#, hits > 0)
    }

    fn execute(&mut self, cmd: &Cmd, value: &RawValue, line: std::ops::Range<u64>, out: &mut Out) -> std::io::Result<()> {
        let ps = self.page_size;
        let Some(op) = cmd.op else {
            // anything that is not a command is echoed back
            return out.write_all(value.get().as_bytes());
        };
        match op {
            "bench" => self.bench(cmd.dirty.unwrap_or(0), out),
            "write_pages" => match cmd.pages {
                Some(p) => self.write_pages(p, out),
                None => write!(out, r#"{{"error":"missing pages"}}"#),
            },
            "report_writes" => self.report_writes(out),
            "info" => self.info(out),
            "echo" => out.write_all(value.get().as_bytes()),
            "mmap" => {
                let pages = cmd.pages.and_then(|p| p.get().parse::<u64>().ok()).unwrap_or(1).max(1);
                let prot = cmd.prot.and_then(parse_prot).unwrap_or(libc::PROT_READ | libc::PROT_WRITE);
                let p = map_anon(pages, ps, libc::PROT_READ | libc::PROT_WRITE);
                touch(p, pages, ps, 0xc3);
                if prot != libc::PROT_READ | libc::PROT_WRITE {
                    // SAFETY: changing protection of our own fresh mapping.
                    unsafe { libc::mprotect(p as *mut _, (pages * ps) as usize, prot) };
                }
                write!(out, r#"{{"addr":{},"pages":{pages}}}"#, p as u64)
            }
            "munmap" => {
                let Some(addr) = cmd.addr else { return write!(out, r#"{{"error":"missing addr"}}"#) };
                let pages = cmd
                    .pages
                    .and_then(|p| p.get().parse::<u64>().ok())
                    .unwrap_or_else(|| self.spare_pages(addr));
                // SAFETY: the caller names a mapping it created or a spare region.
                let r = unsafe { libc::munmap(addr as *mut _, (pages * ps) as usize) };
                write!(out, r#"{{"ok":{}}}"#, r == 0)
            }
            "mprotect" => {
                let Some(addr) = cmd.addr else { return write!(out, r#"{{"error":"missing addr"}}"#) };
                let pages = cmd
                    .pages
                    .and_then(|p| p.get().parse::<u64>().ok())
                    .unwrap_or_else(|| self.spare_pages(addr));
                let Some(prot) = cmd.prot.and_then(parse_prot) else {
                    return write!(out, r#"{{"error":"bad prot"}}"#);
                };
                // SAFETY: as for munmap.
                let r = unsafe { libc::mprotect(addr as *mut _, (pages * ps) as usize, prot) };
                write!(out, r#"{{"ok":{}}}"#, r == 0)
            }
            "brk_grow" => {
                let pages = cmd.pages.and_then(|p| p.get().parse::<u64>().ok()).unwrap_or(1);
                // SAFETY: growing our own program break, then touching the new pages.
                let old = unsafe { libc::sbrk((pages * ps) as isize) };
                if old as isize == -1 {
                    return write!(out, r#"{{"error":"sbrk failed"}}"#);
                }
                // SAFETY: trivial query.
                let new = unsafe { libc::sbrk(0) } as u64;
                let first = (old as u64).div_ceil(ps) * ps;
                let mut a = first;
                while a < new {
                    // SAFETY: inside the freshly grown break.
                    unsafe { std::ptr::write_volatile(a as *mut u8, 0xd4) };
                    a += ps;
                }
                write!(out, r#"{{"old":{},"new":{new}}}"#, old as u64)
            }
            "store_secret" => {
                let Some(token) = cmd.token else { return write!(out, r#"{{"error":"missing token"}}"#) };
                let buf = leak_buffer(token.len());
                buf.copy_from_slice(token.as_bytes());
                self.secret = Some(buf);
                write!(out, r#"{{"stored":{}}}"#, token.len())
            }
            "find_secret" => {
                let Some(token) = cmd.token else { return write!(out, r#"{{"error":"missing token"}}"#) };
                self.find_secret(token, &[line], out)
            }
            "spawn_thread" => {
                STOP_THREADS.store(false, Ordering::SeqCst);
                self.threads.push(std::thread::spawn(background));
                write!(out, r#"{{"threads":{}}}"#, self.threads.len() + 1)
            }
            "stop_threads" => {
                STOP_THREADS.store(true, Ordering::SeqCst);
                for t in self.threads.drain(..) {
                    let _ = t.join();
                }
                write!(out, r#"{{"ok":true}}"#)
            }
            "leak" => {
                let bytes = cmd.bytes.unwrap_or(ps) as usize;
                let buf = leak_buffer(bytes);
                let mut i = 0;
                while i < bytes {
                    buf[i] = 0xee;
                    i += ps as usize;
                }
                let rss = std::fs::read_to_string("/proc/self/status")
                    .ok()
                    .and_then(|s| {
                        s.lines()
                            .find_map(|l| l.strip_prefix("VmRSS:"))
                            .and_then(|v| v.split_whitespace().next()?.parse::<u64>().ok())
                    })
                    .unwrap_or(0);
                write!(out, r#"{{"leaked":{bytes},"rss_kb":{rss}}}"#)
            }
            "work" => {
                // CPU time, so that concurrent guests sharing a core each do the full amount.
                let until = thread_cpu_time() + Duration::from_millis(cmd.ms.unwrap_or(0));
                let mut x = 0u64;
                while thread_cpu_time() < until {
                    for _ in 0..1000 {
                        x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
                    }
                }
                write!(out, r#"{{"ok":true}}"#)
            }
            "open_file" => {
                // SAFETY: opening a descriptor that is intentionally never closed.
                let fd = unsafe { libc::open(c"/dev/null".as_ptr(), libc::O_RDONLY) };
                write!(out, r#"{{"fd":{fd}}}"#)
            }
            "fail" => write!(out, r#"{{"error":"requested failure"}}"#),
            "exit" => std::process::exit(cmd.code.unwrap_or(0)),
            "crash" => {
                // SAFETY: deliberately terminating ourselves.
                unsafe { libc::raise(libc::SIGSEGV) };
                Ok(())
            }
            other => write!(out, r#"{{"error":"unknown op {}"}}"#, other.escape_debug()),
        }
    }
}

fn map_exe_page(page_size: u64) -> Region {
    // SAFETY: mapping one read-only private page of our own executable.
    unsafe {
        let fd = libc::open(c"/proc/self/exe".as_ptr(), libc::O_RDONLY | libc::O_CLOEXEC);
        if fd < 0 {
            return Region { addr: 0, pages: 0 };
        }
        let p = libc::mmap(std::ptr::null_mut(), page_size as usize, libc::PROT_READ, libc::MAP_PRIVATE, fd, 0);
        libc::close(fd);
        if p == libc::MAP_FAILED {
            return Region { addr: 0, pages: 0 };
        }
        std::ptr::read_volatile(p as *const u8);
        Region { addr: p as u64, pages: 1 }
    }
}

fn background() {
    while !STOP_THREADS.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(20));
        HEARTBEATS.fetch_add(1, Ordering::Relaxed);
    }
}

fn write_all_fd(fd: i32, mut data: &[u8]) -> bool {
    while !data.is_empty() {
        // SAFETY: writing from a live slice.
        let n = unsafe { libc::write(fd, data.as_ptr() as *const _, data.len()) };
        if n < 0 {
            if std::io::Error::last_os_error().kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            return false;
        }
        data = &data[n as usize..];
    }
    true
}

fn usage() -> ! {
    eprintln!("usage: refguest [--arena-pages N] [--background-thread] [--done-fd]");
    std::process::exit(2);
}

fn main() {
    let mut arena_pages = 1024u64;
    let mut background_thread = false;
    let mut done_fd = false;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--arena-pages" => {
                arena_pages = args.next().and_then(|v| v.parse().ok()).unwrap_or_else(|| usage());
            }
            "--background-thread" => background_thread = true,
            "--done-fd" => done_fd = true,
            _ => usage(),
        }
    }

    let mut guest = Guest::new(arena_pages, done_fd);
    if background_thread {
        guest.threads.push(std::thread::spawn(background));
    }
    let input = leak_buffer(INPUT_CAP);
    let mut out = Out { buf: leak_buffer(OUTPUT_CAP), len: 0 };
    let (mut start, mut end) = (0usize, 0usize);

    loop {
        let newline = input[start..end].iter().position(|&b| b == b'\n');
        let Some(nl) = newline else {
            if start > 0 {
                input.copy_within(start..end, 0);
                end -= start;
                start = 0;
            }
            if end == INPUT_CAP {
                eprintln!("refguest: request line exceeds {INPUT_CAP} bytes");
                std::process::exit(1);
            }
            // SAFETY: reading into the free tail of our buffer.
            let n = unsafe { libc::read(0, input.as_mut_ptr().add(end) as *mut _, INPUT_CAP - end) };
            if n == 0 {
                return;
            }
            if n < 0 {
                if std::io::Error::last_os_error().kind() == std::io::ErrorKind::Interrupted {
                    continue;
                }
                return;
            }
            end += n as usize;
            continue;
        };
        let line_end = start + nl;
        let line = &input[start..line_end];
        let line_range = line.as_ptr() as u64..line.as_ptr() as u64 + line.len() as u64;
        out.len = 0;
        match serde_json::from_slice::<Request>(line) {
            Ok(req) => {
                let value = req.value.unwrap_or_else(|| serde_json::from_str("null").expect("literal"));
                let cmd: Cmd = serde_json::from_str(value.get()).unwrap_or_default();
                let _ = write!(out, r#"{{"id":{},"result":"#, req.id.get());
                let mark = out.len;
                if guest.execute(&cmd, value, line_range, &mut out).is_err() {
                    out.len = mark;
                    let _ = write!(out, r#"{{"error":"response too large"}}"#);
                }
                let _ = out.write_all(b"}\n");
            }
            Err(e) => {
                let _ = writeln!(out, r#"{{"id":null,"result":{{"error":"malformed request: {}"}}}}"#, e.to_string().escape_debug());
            }
        }
        if !write_all_fd(1, &out.buf[..out.len]) {
            return;
        }
        if let Some(fd) = guest.done_fd {
            write_all_fd(fd, &[0x06]);
        }
        start = line_end + 1;
        if start == end {
            start = 0;
            end = 0;
        }
    }
}

fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}
