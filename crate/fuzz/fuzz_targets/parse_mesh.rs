#![no_main]

use libfuzzer_sys::fuzz_target;
use sdmefem::meshdof::parse_mesh;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mesh) = parse_mesh(text) {
            let again = parse_mesh(&mesh.to_text()).expect("written mesh reparses");
            assert_eq!(again.num_elements(), mesh.num_elements());
            assert_eq!(again.coords(), mesh.coords());
        }
    }
});
