//! Independent view of guest state, read page by page through the proc
//! model, for checking restores against.

use rewind::proc::{
    capture_thread_registers, list_threads, page_size, read_memory, read_memory_layout, read_page_flags, MemoryRegion,
    ThreadRegisters, Tracee,
};

#[derive(Debug, PartialEq, Eq)]
pub struct RegionState {
    pub region: MemoryRegion,
    pub present: Vec<bool>,
    /// Bytes of the present pages, in order.
    pub bytes: Vec<u8>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct OracleState {
    pub regions: Vec<RegionState>,
    pub threads: Vec<ThreadRegisters>,
    pub brk: u64,
}

/// Captures layout, presence, bytes, registers and brk of a stopped guest.
pub fn capture(t: &mut Tracee) -> OracleState {
    let pid = t.pid();
    let layout = read_memory_layout(pid).unwrap();
    let ps = page_size();
    let mut regions = Vec::new();
    for r in layout.tracked() {
        let flags = read_page_flags(t, r).unwrap();
        let present: Vec<bool> = flags.iter().map(|f| f.present).collect();
        let mut bytes = Vec::new();
        for (i, &p) in present.iter().enumerate() {
            if p {
                bytes.extend(read_memory(t, r.start + i as u64 * ps, ps as usize).unwrap());
            }
        }
        regions.push(RegionState { region: r.clone(), present, bytes });
    }
    let mut tids = list_threads(pid).unwrap();
    tids.sort_unstable();
    let threads = tids.into_iter().map(|tid| capture_thread_registers(tid).unwrap()).collect();
    OracleState { regions, threads, brk: layout.brk }
}

/// First difference between two states, if any.
pub fn difference(want: &OracleState, got: &OracleState) -> Option<String> {
    if want.brk != got.brk {
        return Some(format!("brk {:#x} != {:#x}", want.brk, got.brk));
    }
    let wl: Vec<_> = want.regions.iter().map(|r| &r.region).collect();
    let gl: Vec<_> = got.regions.iter().map(|r| &r.region).collect();
    if wl != gl {
        let only_want: Vec<String> = wl.iter().filter(|r| !gl.contains(r)).map(|r| r.to_string()).collect();
        let only_got: Vec<String> = gl.iter().filter(|r| !wl.contains(r)).map(|r| r.to_string()).collect();
        return Some(format!("layout differs: missing {only_want:?}, extra {only_got:?}"));
    }
    for (w, g) in want.regions.iter().zip(&got.regions) {
        if w.present != g.present {
            let i = w.present.iter().zip(&g.present).position(|(a, b)| a != b).unwrap();
            return Some(format!("presence differs in {} at page {i}: want {}", w.region, w.present[i]));
        }
        if w.bytes != g.bytes {
            let i = w.bytes.iter().zip(&g.bytes).position(|(a, b)| a != b).unwrap();
            return Some(format!("bytes differ in {} at present byte {i}", w.region));
        }
    }
    if want.threads != got.threads {
        return Some("thread registers differ".into());
    }
    None
}
