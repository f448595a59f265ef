//! Raw host imports. Pointers are offsets into this module's linear memory.

#[link(wasm_import_module = "faasm")]
extern "C" {
    pub fn read_call_input(buf: *mut u8, buf_len: usize) -> i32;
    pub fn write_call_output(ptr: *const u8, len: usize);
    pub fn chain_call(name: *const u8, name_len: usize, input: *const u8, input_len: usize) -> i64;
    pub fn await_call(call_id: i64, code_out: *mut i32) -> i32;
    pub fn get_call_output(call_id: i64, buf: *mut u8, buf_len: usize) -> i64;

    pub fn get_state(key: *const u8, key_len: usize, len: i64, flags: i32) -> i64;
    pub fn get_state_offset(key: *const u8, key_len: usize, off: i64, len: i64, flags: i32) -> i64;
    pub fn get_state_size(key: *const u8, key_len: usize) -> i64;
    pub fn set_state(key: *const u8, key_len: usize, val: *const u8, val_len: usize) -> i32;
    pub fn set_state_offset(key: *const u8, key_len: usize, val: *const u8, val_len: usize, off: i64) -> i32;
    pub fn push_state(key: *const u8, key_len: usize) -> i32;
    pub fn push_state_offset(key: *const u8, key_len: usize, off: i64, len: i64) -> i32;
    pub fn pull_state(key: *const u8, key_len: usize) -> i32;
    pub fn pull_state_offset(key: *const u8, key_len: usize, off: i64, len: i64) -> i32;
    pub fn append_state(key: *const u8, key_len: usize, val: *const u8, val_len: usize) -> i32;
    pub fn read_appended_state(key: *const u8, key_len: usize, buf: *mut u8, buf_len: usize) -> i64;
    pub fn lock_state_read(key: *const u8, key_len: usize) -> i32;
    pub fn unlock_state_read(key: *const u8, key_len: usize) -> i32;
    pub fn lock_state_write(key: *const u8, key_len: usize) -> i32;
    pub fn unlock_state_write(key: *const u8, key_len: usize) -> i32;
    pub fn lock_state_global_read(key: *const u8, key_len: usize) -> i32;
    pub fn unlock_state_global_read(key: *const u8, key_len: usize) -> i32;
    pub fn lock_state_global_write(key: *const u8, key_len: usize) -> i32;
    pub fn unlock_state_global_write(key: *const u8, key_len: usize) -> i32;

    pub fn sbrk(delta: i32) -> i32;
    pub fn brk(addr: i32) -> i32;
    pub fn mmap(addr: i32, len: i32, prot: i32, flags: i32, fd: i32, off: i64) -> i32;
    pub fn munmap(addr: i32, len: i32) -> i32;

    pub fn socket(domain: i32, ty: i32, protocol: i32) -> i32;
    pub fn connect(fd: i32, addr: *const u8, addr_len: usize) -> i32;
    pub fn bind(fd: i32, addr: *const u8, addr_len: usize) -> i32;
    pub fn send(fd: i32, buf: *const u8, len: usize, flags: i32) -> i64;
    pub fn recv(fd: i32, buf: *mut u8, len: usize, flags: i32) -> i64;
    pub fn dup(fd: i32) -> i32;
}

#[repr(C)]
pub struct Iovec {
    pub buf: *const u8,
    pub len: usize,
}

#[link(wasm_import_module = "wasi_snapshot_preview1")]
extern "C" {
    pub fn path_open(
        dirfd: i32,
        dirflags: i32,
        path: *const u8,
        path_len: usize,
        oflags: i32,
        rights_base: i64,
        rights_inheriting: i64,
        fdflags: i32,
        fd_out: *mut i32,
    ) -> i32;
    pub fn fd_read(fd: i32, iovs: *const Iovec, iovs_len: usize, nread: *mut usize) -> i32;
    pub fn fd_write(fd: i32, iovs: *const Iovec, iovs_len: usize, nwritten: *mut usize) -> i32;
    pub fn fd_close(fd: i32) -> i32;
    pub fn fd_seek(fd: i32, offset: i64, whence: i32, newoffset: *mut u64) -> i32;
    pub fn fd_filestat_get(fd: i32, buf: *mut u8) -> i32;
    pub fn path_filestat_get(dirfd: i32, flags: i32, path: *const u8, path_len: usize, buf: *mut u8) -> i32;
    pub fn clock_time_get(clock_id: i32, precision: i64, time: *mut u64) -> i32;
    pub fn random_get(buf: *mut u8, len: usize) -> i32;
}
